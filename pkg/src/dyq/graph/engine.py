"""Quantized graph construction and the two executors.

``build_quant_graph`` binds every scale statically: per-channel symmetric
weight codes, asymmetric activation sites, INT32 biases at exactly
``S_in * S_w`` (so they add into the accumulator without any rescale), and a
dyadic multiplier for every requantization, residual, concatenation, and
average-pool edge.

``run_true`` then executes with integer multiply/add/shift only, while
``run_fake`` executes the float "simulated quantization" twin: dequantize,
compute in FP32, divide by the output scale, round.  The two disagree
whenever accumulate-then-round meets round-then-accumulate, which is what
``measure_divergence`` quantifies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dyadic import DyadicScale, dn
from ..errors import (
    AccumulatorOverflow,
    DegenerateRange,
    MissingCalibration,
    NumericalError,
    ShapeError,
)
from ..instrument import OpCounter
from ..kernels import (
    INT32_MAX,
    INT32_MIN,
    ConvSpec,
    clamp_codes,
    conv2d_codes,
    matmul_codes,
    maxpool_codes,
    requant_channelwise,
    sumpool_codes,
)
from ..quantizer import (
    QuantParams,
    asymmetric_params,
    dequantize_codes,
    quantize,
    round_ties_away,
    symmetric_scale,
    weight_channel_scales,
)
from ..tensor import FloatTensor, PackedTensor, Shape, pack, unpack_array
from . import model as fm

DEFAULT_ACT_BITS = 8


@dataclass(frozen=True)
class QInput:
    name: str
    shape: tuple
    params: QuantParams

    @property
    def parents(self):
        return ()


@dataclass(frozen=True)
class QConv:
    name: str
    parent: str
    spec: ConvSpec
    bits: int
    weight: PackedTensor
    weight_scales: np.ndarray  # (Co,) float64
    bias_codes: np.ndarray  # (Co,) int32, scale S_in * S_w per channel
    zp_correction: np.ndarray  # (Co,) int32, folds the input zero point
    requant: tuple  # one DyadicScale per output channel
    z_in: int
    params: QuantParams

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class QFc:
    name: str
    parent: str
    in_features: int
    out_features: int
    bits: int
    weight: PackedTensor
    weight_scales: np.ndarray
    bias_codes: np.ndarray
    zp_correction: np.ndarray
    requant: tuple
    z_in: int
    params: QuantParams

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class QRelu:
    name: str
    parent: str
    params: QuantParams  # inherited from the parent site

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class QMaxPool:
    name: str
    parent: str
    window: int
    stride: int
    padding: int
    params: QuantParams  # inherited

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class QAvgPool:
    name: str
    parent: str
    window: int
    stride: int
    requant: DyadicScale  # S_in / (area * S_out), the 1/area folded in
    z_in: int
    params: QuantParams

    @property
    def parents(self):
        return (self.parent,)


@dataclass(frozen=True)
class QAdd:
    name: str
    lhs: str
    rhs: str
    dn_lhs: DyadicScale
    dn_rhs: DyadicScale
    z_lhs: int
    z_rhs: int
    params: QuantParams

    @property
    def parents(self):
        return (self.lhs, self.rhs)


@dataclass(frozen=True)
class QConcat:
    name: str
    branches: tuple
    dns: tuple  # one DyadicScale per branch
    zs: tuple
    params: QuantParams

    @property
    def parents(self):
        return self.branches


OWN_SITE_KINDS = (QInput, QConv, QFc, QAvgPool, QAdd, QConcat)
Q_WEIGHT_KINDS = (QConv, QFc)


@dataclass(frozen=True)
class QuantGraph:
    """Immutable quantized model with all scales statically bound."""

    name: str
    nodes: tuple
    calibration: dict  # site name -> (r_min, r_max) as calibrated

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

    @property
    def weight_layers(self):
        return tuple(n.name for n in self.nodes if isinstance(n, Q_WEIGHT_KINDS))


def calibrate(model: fm.FloatModel, batches, momentum=0.99) -> dict:
    """Observe FP32 activations over batches; returns per-site (r_min, r_max).

    Batch order matters: the first batch seeds each tracker and later ones
    blend in with the given momentum.  Returned ranges are widened to cover
    zero.
    """
    from ..quantizer import RangeTracker, track

    trackers = {}
    saw_any = False
    for batch in batches:
        saw_any = True
        record = {}
        fm.float_forward(model, batch, record=record)
        for name, arr in record.items():
            tracker = trackers.setdefault(name, RangeTracker(momentum=momentum))
            track(tracker, arr)
    if not saw_any:
        raise MissingCalibration("calibration saw no batches")
    return {name: tracker.range() for name, tracker in trackers.items()}


def uniform_bit_config(model: fm.FloatModel, bits, pin_endpoints=True) -> dict:
    """Uniform per-layer bits, first/last weight layer pinned to 8 by default."""
    layers = model.weight_layers
    config = {name: int(bits) for name in layers}
    if pin_endpoints and layers:
        config[layers[0]] = 8
        config[layers[-1]] = 8
    return config


def _range_source(model: fm.FloatModel) -> dict:
    """Map each node to the node whose calibrated range defines its site.

    A site followed directly (and only) by a ReLU is calibrated on the
    ReLU output, so negative pre-activation codes saturate harmlessly and
    the ReLU floor lands exactly on the zero code.
    """
    consumers = model.consumers()
    by_name = model.by_name
    source = {}
    for node in model.nodes:
        kids = consumers[node.name]
        if len(kids) == 1 and isinstance(by_name[kids[0]], fm.ReluNode):
            source[node.name] = kids[0]
        else:
            source[node.name] = node.name
    return source


def _site_bits(model: fm.FloatModel, bit_config: dict) -> dict:
    """Activation bit-width per own-site node.

    A site's codes feed weight layers at that layer's precision (weight and
    activation widths match per layer); pass-through nodes (relu/maxpool)
    forward the requirement.  When several weight layers share one site the
    narrowest wins, mirroring a block input quantized once and reused.
    Sites nothing downstream re-reads through a weight layer (residual/concat
    operands, final outputs) fall back to the producing layer's own width.
    """
    consumers = model.consumers()
    by_name = model.by_name
    memo = {}

    def demand(name):
        if name in memo:
            return memo[name]
        widths = []
        for kid in consumers[name]:
            node = by_name[kid]
            if isinstance(node, fm.WEIGHT_KINDS):
                widths.append(bit_config[node.name])
            elif isinstance(node, (fm.ReluNode, fm.MaxPoolNode)):
                w = demand(kid)
                if w is not None:
                    widths.append(w)
        memo[name] = min(widths) if widths else None
        return memo[name]

    bits = {}
    for node in model.nodes:
        if isinstance(node, (fm.ReluNode, fm.MaxPoolNode)):
            continue
        asked = demand(node.name)
        if asked is not None:
            bits[node.name] = asked
        elif isinstance(node, fm.WEIGHT_KINDS):
            bits[node.name] = bit_config[node.name]
        else:
            bits[node.name] = DEFAULT_ACT_BITS
    return bits


def _site_quant_params(node_name, model, calib, bits, range_src) -> QuantParams:
    src = range_src[node_name]
    if src not in calib:
        raise MissingCalibration(f"no calibrated range for site {src!r}")
    r_min, r_max = calib[src]
    r_min, r_max = min(float(r_min), 0.0), max(float(r_max), 0.0)
    if isinstance(model.by_name[node_name], fm.InputNode):
        scale = symmetric_scale(r_min, r_max, bits)
        return QuantParams(scale, 0, bits)
    if r_min == r_max:
        raise DegenerateRange(f"site {node_name!r} calibrated to a zero range")
    scale, zp = asymmetric_params(r_min, r_max, bits)
    return QuantParams(scale, zp, bits)


def _quantize_weights(weight, bits):
    scales = weight_channel_scales(weight, bits)
    broad = scales.reshape((-1,) + (1,) * (weight.ndim - 1))
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    codes = np.clip(round_ties_away(weight / broad), lo, hi).astype(np.int32)
    packed = pack(codes.ravel(), bits, Shape(weight.shape))
    return packed, codes, scales


def _int32_or_raise(arr, what):
    arr = np.asarray(arr)
    if arr.size and (arr.max() > INT32_MAX or arr.min() < INT32_MIN):
        raise NumericalError(f"{what} does not fit INT32")
    return arr.astype(np.int32)


def build_quant_graph(model: fm.FloatModel, calib: dict, bit_config: dict) -> QuantGraph:
    """Bind every scale of a BN-folded float model into a QuantGraph.

    ``calib`` maps node names to (r_min, r_max); ``bit_config`` maps every
    weight layer to its bit-width.
    """
    if not model.has_weights:
        raise ShapeError("model carries no weights; cannot quantize")
    for node in model.nodes:
        if isinstance(node, fm.ConvNode) and node.bn is not None:
            raise ShapeError(f"{node.name}: fold batch norm before quantizing")
    missing = [n for n in model.weight_layers if n not in bit_config]
    if missing:
        raise ShapeError(f"bit config missing layers: {missing}")

    calib = {
        k: (v["r_min"], v["r_max"]) if isinstance(v, dict) else tuple(v)
        for k, v in calib.items()
    }
    range_src = _range_source(model)
    site_bits = _site_bits(model, bit_config)
    params = {
        name: _site_quant_params(name, model, calib, bits, range_src)
        for name, bits in site_bits.items()
    }

    def act_scale(name) -> float:
        return float(params[name].scale)

    qnodes = []
    for node in model.nodes:
        if isinstance(node, fm.InputNode):
            qnodes.append(QInput(node.name, tuple(node.shape), params[node.name]))
        elif isinstance(node, (fm.ConvNode, fm.FcNode)):
            bits = bit_config[node.name]
            packed, codes, scales = _quantize_weights(node.weight, bits)
            in_site = _owning_site(model, node.parent)
            s_in = act_scale(in_site)
            z_in = params[in_site].zero_point
            s_out = act_scale(node.name)
            bias = node.bias if node.bias is not None else np.zeros(codes.shape[0])
            bias_scale = s_in * scales
            bias_codes = _int32_or_raise(
                round_ties_away(np.asarray(bias, dtype=np.float64) / bias_scale),
                f"{node.name} bias codes",
            )
            reduce_axes = tuple(range(1, codes.ndim))
            zp_corr = _int32_or_raise(
                -int(z_in) * codes.astype(np.int64).sum(axis=reduce_axes),
                f"{node.name} zero-point correction",
            )
            _int32_or_raise(
                bias_codes.astype(np.int64) + zp_corr.astype(np.int64),
                f"{node.name} folded bias",
            )
            edges = tuple(dn(s * s_in / s_out) for s in scales)
            common = dict(
                name=node.name,
                bits=bits,
                weight=packed,
                weight_scales=scales,
                bias_codes=bias_codes,
                zp_correction=zp_corr,
                requant=edges,
                z_in=int(z_in),
                params=params[node.name],
            )
            if isinstance(node, fm.ConvNode):
                qnodes.append(QConv(parent=node.parent, spec=node.spec, **common))
            else:
                qnodes.append(
                    QFc(
                        parent=node.parent,
                        in_features=node.in_features,
                        out_features=node.out_features,
                        **common,
                    )
                )
        elif isinstance(node, fm.ReluNode):
            site = _owning_site(model, node.name)
            qnodes.append(QRelu(node.name, node.parent, params[site]))
        elif isinstance(node, fm.MaxPoolNode):
            site = _owning_site(model, node.name)
            qnodes.append(
                QMaxPool(
                    node.name, node.parent, node.window, node.stride, node.padding,
                    params[site],
                )
            )
        elif isinstance(node, fm.AvgPoolNode):
            src_site = _owning_site(model, node.parent)
            area = node.window * node.window
            edge = dn(act_scale(src_site) / (area * act_scale(node.name)))
            qnodes.append(
                QAvgPool(
                    node.name,
                    node.parent,
                    node.window,
                    node.stride,
                    edge,
                    params[src_site].zero_point,
                    params[node.name],
                )
            )
        elif isinstance(node, fm.AddNode):
            s_out = act_scale(node.name)
            lhs_site = _owning_site(model, node.lhs)
            rhs_site = _owning_site(model, node.rhs)
            qnodes.append(
                QAdd(
                    node.name,
                    node.lhs,
                    node.rhs,
                    dn(act_scale(lhs_site) / s_out),
                    dn(act_scale(rhs_site) / s_out),
                    params[lhs_site].zero_point,
                    params[rhs_site].zero_point,
                    params[node.name],
                )
            )
        elif isinstance(node, fm.ConcatNode):
            s_out = act_scale(node.name)
            sites = [_owning_site(model, p) for p in node.branches]
            qnodes.append(
                QConcat(
                    node.name,
                    tuple(node.branches),
                    tuple(dn(act_scale(s) / s_out) for s in sites),
                    tuple(params[s].zero_point for s in sites),
                    params[node.name],
                )
            )
        else:
            raise ShapeError(f"unsupported node type {type(node).__name__}")
    calib_out = {k: (float(v[0]), float(v[1])) for k, v in calib.items()}
    return QuantGraph(model.name, tuple(qnodes), calib_out)


def _owning_site(model: fm.FloatModel, name) -> str:
    """Resolve pass-through nodes (relu/maxpool) to the site they forward."""
    node = model.by_name[name]
    while isinstance(node, (fm.ReluNode, fm.MaxPoolNode)):
        node = model.by_name[node.parent]
    return node.name


# ---------------------------------------------------------------------------
# Executors.
# ---------------------------------------------------------------------------


def _quantize_input(g: QuantGraph, x) -> np.ndarray:
    arr = x.data if isinstance(x, FloatTensor) else np.asarray(x, dtype=np.float32)
    gshape = g.input_node.shape
    if arr.shape[1:] != tuple(gshape[1:]):
        raise ShapeError(f"input {arr.shape} does not match model input {gshape}")
    return unpack_array(quantize(arr, g.input_node.params))


def run_true(g: QuantGraph, x, counter=None, collect=False):
    """Integer-only forward pass.

    Between input quantization and output dequantization every value is a
    signed integer array and every operation reports to ``counter``; a clean
    run ends with ``counter.float_ops == 0``.
    """
    counter = counter if counter is not None else OpCounter()
    codes = {g.input_node.name: _quantize_input(g, x)}
    for node in g.nodes[1:]:
        if isinstance(node, (QConv, QFc)):
            src = counter.check_integer_array(codes[node.parent])
            wcodes = unpack_array(node.weight)
            if isinstance(node, QConv):
                acc = conv2d_codes(
                    wcodes, src, node.spec, zh=0, pad_code=node.z_in, counter=counter
                )
                bias = (node.bias_codes.astype(np.int64) + node.zp_correction)[
                    None, :, None, None
                ]
            else:
                flat = src.reshape(src.shape[0], -1)
                if flat.shape[1] != node.in_features:
                    raise ShapeError(
                        f"{node.name}: input flattens to {flat.shape[1]}, "
                        f"expects {node.in_features}"
                    )
                acc = matmul_codes(wcodes, flat.T, zh=0, counter=counter).T
                bias = (node.bias_codes.astype(np.int64) + node.zp_correction)[None, :]
            acc = acc.astype(np.int64) + bias
            counter.count_add(acc.size)
            if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
                raise AccumulatorOverflow(f"{node.name}: bias add exceeds int32")
            mant = np.array([e.b for e in node.requant], dtype=np.int64)
            expo = np.array([e.c for e in node.requant], dtype=np.int64)
            out = requant_channelwise(acc, mant, expo, axis=1, counter=counter)
            out = out + node.params.zero_point
            counter.count_add(out.size)
            out = clamp_codes(out, node.params.bits, counter=counter)
        elif isinstance(node, QRelu):
            src = counter.check_integer_array(codes[node.parent])
            out = np.maximum(src, np.int32(node.params.zero_point))
            counter.count_cmp(out.size)
        elif isinstance(node, QMaxPool):
            src = counter.check_integer_array(codes[node.parent])
            out = maxpool_codes(src, node.window, node.stride, node.padding, counter)
        elif isinstance(node, QAvgPool):
            src = counter.check_integer_array(codes[node.parent])
            sums = sumpool_codes(src, node.window, node.stride, counter)
            area = node.window * node.window
            centered = sums.astype(np.int64) - area * node.z_in
            counter.count_add(centered.size)
            out = requant_channelwise(
                centered,
                np.array([node.requant.b]),
                np.array([node.requant.c]),
                counter=counter,
            )
            out = out + node.params.zero_point
            counter.count_add(out.size)
            out = clamp_codes(out, node.params.bits, counter=counter)
        elif isinstance(node, QAdd):
            terms = []
            for src_name, edge, z in (
                (node.lhs, node.dn_lhs, node.z_lhs),
                (node.rhs, node.dn_rhs, node.z_rhs),
            ):
                src = counter.check_integer_array(codes[src_name]).astype(np.int64)
                counter.count_add(src.size)
                terms.append(
                    requant_channelwise(
                        src - z, np.array([edge.b]), np.array([edge.c]), counter=counter
                    )
                )
            out = terms[0] + terms[1] + node.params.zero_point
            counter.count_add(2 * out.size)
            if out.size and (out.max() > INT32_MAX or out.min() < INT32_MIN):
                raise AccumulatorOverflow(f"{node.name}: residual add exceeds int32")
            out = clamp_codes(out, node.params.bits, counter=counter)
        elif isinstance(node, QConcat):
            parts = []
            for src_name, edge, z in zip(node.branches, node.dns, node.zs):
                src = counter.check_integer_array(codes[src_name]).astype(np.int64)
                counter.count_add(src.size)
                scaled = requant_channelwise(
                    src - z, np.array([edge.b]), np.array([edge.c]), counter=counter
                )
                scaled = scaled + node.params.zero_point
                counter.count_add(scaled.size)
                parts.append(clamp_codes(scaled, node.params.bits, counter=counter))
            out = np.concatenate(parts, axis=1)
        else:
            raise ShapeError(f"unsupported node type {type(node).__name__}")
        codes[node.name] = counter.check_integer_array(out)
    final = codes[g.output_name]
    out_node = g.by_name[g.output_name]
    packed = pack(final.ravel(), out_node.params.bits, Shape(final.shape))
    logits = FloatTensor(
        Shape(final.shape), dequantize_codes(final, out_node.params)
    )
    sites = codes if collect else None
    return packed, logits, counter, sites


def infer_true(g: QuantGraph, x, counter=None):
    """(final codes, dequantized logits) of the integer-only executor."""
    packed, logits, _, _ = run_true(g, x, counter=counter)
    return packed, logits


def _fake_requant(a, params: QuantParams):
    """FP32 requantization: divide by the scale, round, clamp, rescale."""
    scaled = np.asarray(a, dtype=np.float32) / np.float32(params.scale)
    q = round_ties_away(scaled) + params.zero_point
    q = np.clip(q, params.qmin, params.qmax)
    return ((q - params.zero_point) * np.float64(params.scale)).astype(np.float32)


def run_fake(g: QuantGraph, x, collect=False):
    """Simulated-quantization forward pass; every step computes in FP32."""
    codes = _quantize_input(g, x)
    values = {g.input_node.name: dequantize_codes(codes, g.input_node.params)}
    for node in g.nodes[1:]:
        src = values[node.parents[0]] if node.parents else None
        if isinstance(node, (QConv, QFc)):
            wcodes = unpack_array(node.weight)
            w_deq = (
                node.weight_scales.reshape((-1,) + (1,) * (wcodes.ndim - 1)) * wcodes
            ).astype(np.float32)
            s_in = _input_scale_of(g, node)
            bias_deq = (s_in * node.weight_scales * node.bias_codes).astype(np.float32)
            if isinstance(node, QConv):
                a = fm.conv2d_f32(w_deq, src, node.spec.stride, node.spec.padding)
                a = a + bias_deq[None, :, None, None]
            else:
                a = src.reshape(src.shape[0], -1) @ w_deq.T + bias_deq
            out = _fake_requant(a, node.params)
        elif isinstance(node, QRelu):
            out = np.maximum(src, np.float32(0.0))
        elif isinstance(node, QMaxPool):
            out = fm.maxpool_f32(src, node.window, node.stride, node.padding)
        elif isinstance(node, QAvgPool):
            area = np.float32(node.window * node.window)
            out = _fake_requant(
                fm.sumpool_f32(src, node.window, node.stride) / area, node.params
            )
        elif isinstance(node, QAdd):
            out = _fake_requant(values[node.lhs] + values[node.rhs], node.params)
        elif isinstance(node, QConcat):
            stacked = np.concatenate([values[p] for p in node.branches], axis=1)
            out = _fake_requant(stacked, node.params)
        else:
            raise ShapeError(f"unsupported node type {type(node).__name__}")
        values[node.name] = out.astype(np.float32)
    final = values[g.output_name]
    sites = values if collect else None
    return FloatTensor(Shape(final.shape), final), sites


def infer_fake(g: QuantGraph, x) -> FloatTensor:
    out, _ = run_fake(g, x)
    return out


def _input_scale_of(g: QuantGraph, node) -> float:
    parent = g.by_name[node.parent]
    while isinstance(parent, (QRelu, QMaxPool)):
        parent = g.by_name[parent.parent]
    return float(parent.params.scale)


@dataclass(frozen=True)
class DivergenceReport:
    """Per-site normalized L2 gap between the fake and true executors."""

    rows: tuple  # ((site name, normalized difference), ...) in layer order

    def __iter__(self):
        return iter(self.rows)

    def values(self):
        return [v for _, v in self.rows]

    def to_csv(self) -> str:
        lines = ["layer,normalized_difference"]
        lines += [f"{name},{value!r}" for name, value in self.rows]
        return "\n".join(lines) + "\n"


def measure_divergence(g: QuantGraph, x) -> DivergenceReport:
    """Run both executors and compare dequantized activations site by site."""
    _, _, _, true_sites = run_true(g, x, collect=True)
    _, fake_sites = run_fake(g, x, collect=True)
    rows = []
    for node in g.nodes:
        t = dequantize_codes(true_sites[node.name], node.params).astype(np.float64)
        f = fake_sites[node.name].astype(np.float64)
        denom = np.linalg.norm(t.ravel())
        num = np.linalg.norm((f - t).ravel())
        rows.append((node.name, float(num / denom) if denom > 0 else 0.0))
    return DivergenceReport(tuple(rows))
