"""Float model representation: a linear-ordered DAG of layers.

Nodes appear in topological order (parents strictly before consumers), the
first node is the single input, and exactly one node is consumed by nobody
(the output).  Convolutions may carry frozen batch-norm statistics; weights
are optional so the same structure doubles as a cost-model architecture
description.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import NumericalError, ShapeError
from ..kernels import ConvSpec

BN_SIGMA_FLOOR = 1e-5


@dataclass(frozen=True)
class BatchNorm:
    """Frozen batch-norm statistics: gain * (a - mean) / sigma + shift."""

    mean: np.ndarray
    sigma: np.ndarray
    gain: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        for field in ("mean", "sigma", "gain", "shift"):
            arr = np.ascontiguousarray(getattr(self, field), dtype=np.float32)
            if arr.ndim != 1:
                raise ShapeError(f"batch-norm {field} must be a vector")
            object.__setattr__(self, field, arr)
        n = self.mean.shape[0]
        if any(getattr(self, f).shape[0] != n for f in ("sigma", "gain", "shift")):
            raise ShapeError("batch-norm vectors disagree in length")


@dataclass(frozen=True)
class InputNode:
    name: str
    shape: tuple

    @property
    def parents(self):
        return ()


@dataclass(frozen=True)
class ConvNode:
    name: str
    parent: str
    spec: ConvSpec
    weight: object = None  # (Co, Ci, Kh, Kw) float32 or None
    bias: object = None  # (Co,) float32 or None
    bn: object = None  # BatchNorm or None

    def __post_init__(self):
        if self.weight is not None:
            w = np.ascontiguousarray(self.weight, dtype=np.float32)
            expect = (
                self.spec.out_channels,
                self.spec.in_channels,
                self.spec.kernel_h,
                self.spec.kernel_w,
            )
            if w.shape != expect:
                raise ShapeError(f"conv weight {w.shape} != {expect}")
            object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=np.float32)
            if b.shape != (self.spec.out_channels,):
                raise ShapeError("conv bias length must equal out_channels")
            object.__setattr__(self, "bias", b)
        if self.bn is not None and self.bn.mean.shape[0] != self.spec.out_channels:
            raise ShapeError("batch-norm width must equal out_channels")

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class FcNode:
    name: str
    parent: str
    in_features: int
    out_features: int
    weight: object = None  # (out, in) float32 or None
    bias: object = None

    def __post_init__(self):
        if self.weight is not None:
            w = np.ascontiguousarray(self.weight, dtype=np.float32)
            if w.shape != (self.out_features, self.in_features):
                raise ShapeError(
                    f"fc weight {w.shape} != {(self.out_features, self.in_features)}"
                )
            object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=np.float32)
            if b.shape != (self.out_features,):
                raise ShapeError("fc bias length must equal out_features")
            object.__setattr__(self, "bias", b)

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class ReluNode:
    name: str
    parent: str

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class MaxPoolNode:
    name: str
    parent: str
    window: int
    stride: int
    padding: int = 0

    def __post_init__(self):
        # a window must always overlap at least one real cell
        if self.padding > self.window // 2:
            raise ShapeError(
                f"{self.name}: padding {self.padding} exceeds half the window"
            )

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class AvgPoolNode:
    name: str
    parent: str
    window: int
    stride: int

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class AddNode:
    name: str
    lhs: str
    rhs: str

    @property
    def parents(self):
        return (self.lhs, self.rhs)


@dataclass(frozen=True)
class ConcatNode:
    name: str
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if len(self.branches) < 2:
            raise ShapeError("concat needs at least two branches")

    @property
    def parents(self):
        return self.branches


WEIGHT_KINDS = (ConvNode, FcNode)


@dataclass(frozen=True)
class FloatModel:
    name: str
    nodes: tuple

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if not nodes or not isinstance(nodes[0], InputNode):
            raise ShapeError("first node must be the single input")
        seen = set()
        for node in nodes:
            if node.name in seen:
                raise ShapeError(f"duplicate node name {node.name!r}")
            if isinstance(node, InputNode) and seen:
                raise ShapeError("model must have exactly one input")
            for p in node.parents:
                if p not in seen:
                    raise ShapeError(
                        f"node {node.name!r} references {p!r} before definition"
                    )
            seen.add(node.name)
        consumed = {p for node in nodes for p in node.parents}
        sinks = [n.name for n in nodes if n.name not in consumed]
        if len(sinks) != 1:
            raise ShapeError(f"model must have exactly one output, found {sinks}")
        object.__setattr__(self, "nodes", nodes)
        self.infer_shapes()  # validates edge compatibility

    @property
    def by_name(self):
        return {n.name: n for n in self.nodes}

    @property
    def input_node(self):
        return self.nodes[0]

    @property
    def output_name(self):
        consumed = {p for node in self.nodes for p in node.parents}
        return next(n.name for n in self.nodes if n.name not in consumed)

    def consumers(self) -> dict:
        out = {n.name: [] for n in self.nodes}
        for node in self.nodes:
            for p in node.parents:
                out[p].append(node.name)
        return out

    @property
    def weight_layers(self) -> tuple:
        return tuple(n.name for n in self.nodes if isinstance(n, WEIGHT_KINDS))

    @property
    def has_weights(self) -> bool:
        return all(
            n.weight is not None for n in self.nodes if isinstance(n, WEIGHT_KINDS)
        )

    def infer_shapes(self) -> dict:
        """Per-node output shape (batch dim taken from the input node)."""
        shapes = {}
        for node in self.nodes:
            if isinstance(node, InputNode):
                if len(node.shape) not in (2, 4):
                    raise ShapeError("input must be rank 2 or 4")
                shapes[node.name] = tuple(int(d) for d in node.shape)
            elif isinstance(node, ConvNode):
                n, c, h, w = shapes[node.parent]
                if c != node.spec.in_channels:
                    raise ShapeError(
                        f"{node.name}: parent has {c} channels, "
                        f"spec expects {node.spec.in_channels}"
                    )
                oh, ow = node.spec.out_hw(h, w)
                shapes[node.name] = (n, node.spec.out_channels, oh, ow)
            elif isinstance(node, FcNode):
                parent = shapes[node.parent]
                feats = int(np.prod(parent[1:]))
                if feats != node.in_features:
                    raise ShapeError(
                        f"{node.name}: parent flattens to {feats}, "
                        f"expects {node.in_features}"
                    )
                shapes[node.name] = (parent[0], node.out_features)
            elif isinstance(node, (ReluNode,)):
                shapes[node.name] = shapes[node.parent]
            elif isinstance(node, MaxPoolNode):
                n, c, h, w = shapes[node.parent]
                oh = (h + 2 * node.padding - node.window) // node.stride + 1
                ow = (w + 2 * node.padding - node.window) // node.stride + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"{node.name}: pooling collapses {h}x{w}")
                shapes[node.name] = (n, c, oh, ow)
            elif isinstance(node, AvgPoolNode):
                n, c, h, w = shapes[node.parent]
                oh = (h - node.window) // node.stride + 1
                ow = (w - node.window) // node.stride + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"{node.name}: pooling collapses {h}x{w}")
                shapes[node.name] = (n, c, oh, ow)
            elif isinstance(node, AddNode):
                if shapes[node.lhs] != shapes[node.rhs]:
                    raise ShapeError(
                        f"{node.name}: operands {shapes[node.lhs]} vs "
                        f"{shapes[node.rhs]} differ"
                    )
                shapes[node.name] = shapes[node.lhs]
            elif isinstance(node, ConcatNode):
                parts = [shapes[p] for p in node.branches]
                base = parts[0]
                for s in parts[1:]:
                    if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
                        raise ShapeError(f"{node.name}: branch shapes {parts} differ")
                shapes[node.name] = (base[0], sum(s[1] for s in parts), *base[2:])
            else:
                raise ShapeError(f"unknown node type {type(node).__name__}")
        return shapes


# ---------------------------------------------------------------------------
# Float32 execution (reference semantics for calibration and fold checks).
# ---------------------------------------------------------------------------


def conv2d_f32(weight, x, stride, pad) -> np.ndarray:
    w = np.asarray(weight, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    n, ci, h, ww = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    padded = np.zeros((n, ci, h + 2 * pad, ww + 2 * pad), dtype=np.float32)
    padded[:, :, pad : pad + h, pad : pad + ww] = x
    out = np.zeros((n, co, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out


def maxpool_f32(x, window, stride, pad) -> np.ndarray:
    n, c, h, w = x.shape
    oh = (h + 2 * pad - window) // stride + 1
    ow = (w + 2 * pad - window) // stride + 1
    padded = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=np.float32)
    padded[:, :, pad : pad + h, pad : pad + w] = x
    out = np.full((n, c, oh, ow), -np.inf, dtype=np.float32)
    for i in range(window):
        for j in range(window):
            np.maximum(
                out,
                padded[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride],
                out=out,
            )
    return out


def sumpool_f32(x, window, stride) -> np.ndarray:
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=np.float32)
    for i in range(window):
        for j in range(window):
            out += x[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return out


def float_forward(model: FloatModel, x, record=None) -> np.ndarray:
    """FP32 forward pass; ``record`` collects every node output by name."""
    if not model.has_weights:
        raise ShapeError("model carries no weights; cannot execute")
    x = np.asarray(x, dtype=np.float32)
    in_shape = model.input_node.shape
    if x.shape[1:] != tuple(in_shape[1:]):
        raise ShapeError(f"input {x.shape} does not match model input {in_shape}")
    values = {}
    for node in model.nodes:
        if isinstance(node, InputNode):
            out = x
        elif isinstance(node, ConvNode):
            out = conv2d_f32(
                node.weight, values[node.parent], node.spec.stride, node.spec.padding
            )
            if node.bias is not None:
                out = out + node.bias[None, :, None, None]
            if node.bn is not None:
                bn = node.bn
                gain = (bn.gain / bn.sigma)[None, :, None, None]
                out = gain * (out - bn.mean[None, :, None, None]) + bn.shift[
                    None, :, None, None
                ]
        elif isinstance(node, FcNode):
            flat = values[node.parent].reshape(x.shape[0], -1)
            out = flat @ node.weight.T.astype(np.float32)
            if node.bias is not None:
                out = out + node.bias
        elif isinstance(node, ReluNode):
            out = np.maximum(values[node.parent], np.float32(0.0))
        elif isinstance(node, MaxPoolNode):
            out = maxpool_f32(values[node.parent], node.window, node.stride, node.padding)
        elif isinstance(node, AvgPoolNode):
            area = np.float32(node.window * node.window)
            out = sumpool_f32(values[node.parent], node.window, node.stride) / area
        elif isinstance(node, AddNode):
            out = values[node.lhs] + values[node.rhs]
        elif isinstance(node, ConcatNode):
            out = np.concatenate([values[p] for p in node.branches], axis=1)
        values[node.name] = out.astype(np.float32)
        if record is not None:
            record[node.name] = values[node.name]
    return values[model.output_name]


def fold_bn(model: FloatModel) -> FloatModel:
    """Absorb frozen batch-norm statistics into the convolution they follow.

    W' = (gain / sigma) * W row-wise and b' = shift + (gain / sigma) *
    (bias - mean); the result computes the same function in FP32 up to
    rounding.
    """
    folded = []
    for node in model.nodes:
        if isinstance(node, ConvNode) and node.bn is not None:
            if node.weight is None:
                raise ShapeError(f"{node.name}: cannot fold without weights")
            bn = node.bn
            if np.any(bn.sigma <= BN_SIGMA_FLOOR):
                raise NumericalError(
                    f"{node.name}: batch-norm sigma at or below {BN_SIGMA_FLOOR}"
                )
            ratio = (bn.gain.astype(np.float64) / bn.sigma.astype(np.float64)).astype(
                np.float32
            )
            weight = node.weight * ratio[:, None, None, None]
            bias = node.bias if node.bias is not None else np.zeros_like(bn.mean)
            bias = bn.shift + ratio * (bias - bn.mean)
            folded.append(replace(node, weight=weight, bias=bias, bn=None))
        else:
            folded.append(node)
    return FloatModel(model.name, tuple(folded))
