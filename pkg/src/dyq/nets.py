"""Model constructors: demo networks for tests, docs, and cost studies.

Everything here is built programmatically and deterministically from a seed;
nothing is downloaded.  ``resnet18`` reproduces the standard ImageNet
topology (optionally with random weights) and is the source of the shipped
``data/resnet18.json`` architecture file.
"""

from __future__ import annotations

import numpy as np

from .dyadic import dn
from .kernels import ConvSpec
from .quantizer import QuantParams
from .tensor import Shape, pack
from .graph import engine as qg
from .graph.model import (
    AddNode,
    AvgPoolNode,
    BatchNorm,
    ConcatNode,
    ConvNode,
    FcNode,
    FloatModel,
    InputNode,
    MaxPoolNode,
    ReluNode,
)


def _conv_weight(rng, co, ci, k):
    fan_in = ci * k * k
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(co, ci, k, k)).astype(
        np.float32
    )


def toy_cnn(seed=0) -> FloatModel:
    """Small conv/pool/fc net with one batch-norm stage; 3 weight layers."""
    rng = np.random.default_rng(seed)
    nodes = [
        InputNode("input", (1, 3, 8, 8)),
        ConvNode(
            "conv1",
            "input",
            ConvSpec(3, 8, 3, 3, stride=1, padding=1),
            weight=_conv_weight(rng, 8, 3, 3),
            bias=rng.normal(0, 0.1, 8).astype(np.float32),
            bn=BatchNorm(
                mean=rng.normal(0, 0.2, 8),
                sigma=rng.uniform(0.5, 1.5, 8),
                gain=rng.uniform(0.5, 1.5, 8),
                shift=rng.normal(0, 0.2, 8),
            ),
        ),
        ReluNode("relu1", "conv1"),
        MaxPoolNode("pool1", "relu1", window=2, stride=2),
        ConvNode(
            "conv2",
            "pool1",
            ConvSpec(8, 16, 3, 3, stride=1, padding=1),
            weight=_conv_weight(rng, 16, 8, 3),
            bias=rng.normal(0, 0.1, 16).astype(np.float32),
        ),
        ReluNode("relu2", "conv2"),
        FcNode(
            "fc",
            "relu2",
            in_features=16 * 4 * 4,
            out_features=10,
            weight=rng.normal(0, 1 / 16.0, (10, 256)).astype(np.float32),
            bias=rng.normal(0, 0.1, 10).astype(np.float32),
        ),
    ]
    return FloatModel("toy_cnn", tuple(nodes))


def residual_tower(blocks=7, channels=8, hw=6, seed=0) -> FloatModel:
    """Stem conv + ``blocks`` two-conv residual blocks + fc head.

    With the default 7 blocks the model has 16 weight layers, which is deep
    enough for rounding disagreements between the integer and simulated
    executors to accumulate visibly.
    """
    rng = np.random.default_rng(seed)
    nodes = [
        InputNode("input", (1, 3, hw, hw)),
        ConvNode(
            "stem",
            "input",
            ConvSpec(3, channels, 3, 3, stride=1, padding=1),
            weight=_conv_weight(rng, channels, 3, 3),
            bias=rng.normal(0, 0.05, channels).astype(np.float32),
        ),
        ReluNode("stem_relu", "stem"),
    ]
    prev = "stem_relu"
    for i in range(blocks):
        a, b = f"block{i}_conv1", f"block{i}_conv2"
        nodes += [
            ConvNode(
                a,
                prev,
                ConvSpec(channels, channels, 3, 3, stride=1, padding=1),
                weight=_conv_weight(rng, channels, channels, 3),
                bias=rng.normal(0, 0.05, channels).astype(np.float32),
            ),
            ReluNode(f"{a}_relu", a),
            ConvNode(
                b,
                f"{a}_relu",
                ConvSpec(channels, channels, 3, 3, stride=1, padding=1),
                weight=_conv_weight(rng, channels, channels, 3),
                bias=rng.normal(0, 0.05, channels).astype(np.float32),
            ),
            AddNode(f"block{i}_add", prev, b),
            ReluNode(f"block{i}_relu", f"block{i}_add"),
        ]
        prev = f"block{i}_relu"
    nodes.append(
        FcNode(
            "head",
            prev,
            in_features=channels * hw * hw,
            out_features=10,
            weight=rng.normal(0, 1 / np.sqrt(channels * hw * hw), (10, channels * hw * hw)).astype(np.float32),
            bias=rng.normal(0, 0.05, 10).astype(np.float32),
        )
    )
    return FloatModel("residual_tower", tuple(nodes))


def concat_net(seed=0, channels=4, hw=6) -> FloatModel:
    """Inception-style block: three conv branches plus an avg-pool branch.

    All branches halve the spatial extent so the pool branch (which reads
    the shared block input directly) concatenates cleanly with the convs.
    """
    rng = np.random.default_rng(seed)
    c = channels
    nodes = [
        InputNode("input", (1, c, hw, hw)),
        ConvNode(
            "pre",
            "input",
            ConvSpec(c, c, 3, 3, stride=1, padding=1),
            weight=_conv_weight(rng, c, c, 3),
            bias=rng.normal(0, 0.05, c).astype(np.float32),
        ),
        ReluNode("pre_relu", "pre"),
    ]
    for branch, k, pad in (("b1", 3, 1), ("b2", 3, 1), ("b3", 1, 0)):
        nodes += [
            ConvNode(
                branch,
                "pre_relu",
                ConvSpec(c, c, k, k, stride=2, padding=pad),
                weight=_conv_weight(rng, c, c, k),
                bias=rng.normal(0, 0.05, c).astype(np.float32),
            ),
            ReluNode(f"{branch}_relu", branch),
        ]
    out_hw = (hw + 2 - 3) // 2 + 1
    nodes += [
        AvgPoolNode("pool_branch", "pre_relu", window=2, stride=2),
        ConcatNode("join", ("b1_relu", "b2_relu", "b3_relu", "pool_branch")),
        FcNode(
            "head",
            "join",
            in_features=4 * c * out_hw * out_hw,
            out_features=5,
            weight=rng.normal(
                0, 1 / np.sqrt(4 * c * out_hw * out_hw), (5, 4 * c * out_hw * out_hw)
            ).astype(np.float32),
            bias=rng.normal(0, 0.05, 5).astype(np.float32),
        ),
    ]
    return FloatModel("concat_net", tuple(nodes))


def resnet18(with_weights=False, seed=0, classes=1000) -> FloatModel:
    """Standard 18-layer residual ImageNet topology (batch-norm folded view).

    ``with_weights=False`` yields an architecture-only model for the cost
    planner; ``with_weights=True`` fills in seeded random weights so the
    sensitivity pipeline has something to perturb.
    """
    rng = np.random.default_rng(seed)

    def conv(name, parent, ci, co, k, stride, pad):
        weight = _conv_weight(rng, co, ci, k) if with_weights else None
        bias = (
            rng.normal(0, 0.05, co).astype(np.float32) if with_weights else None
        )
        return ConvNode(name, parent, ConvSpec(ci, co, k, k, stride, pad), weight, bias)

    nodes = [
        InputNode("input", (1, 3, 224, 224)),
        conv("conv1", "input", 3, 64, 7, 2, 3),
        ReluNode("conv1_relu", "conv1"),
        MaxPoolNode("pool1", "conv1_relu", window=3, stride=2, padding=1),
    ]
    prev = "pool1"
    widths = (64, 128, 256, 512)
    in_c = 64
    for stage, width in enumerate(widths, start=1):
        for block in range(2):
            base = f"layer{stage}.{block}"
            stride = 2 if (stage > 1 and block == 0) else 1
            nodes.append(conv(f"{base}.conv1", prev, in_c, width, 3, stride, 1))
            nodes.append(ReluNode(f"{base}.conv1_relu", f"{base}.conv1"))
            nodes.append(
                conv(f"{base}.conv2", f"{base}.conv1_relu", width, width, 3, 1, 1)
            )
            skip = prev
            if stride != 1 or in_c != width:
                nodes.append(conv(f"{base}.downsample", prev, in_c, width, 1, stride, 0))
                skip = f"{base}.downsample"
            nodes.append(AddNode(f"{base}.add", f"{base}.conv2", skip))
            nodes.append(ReluNode(f"{base}.relu", f"{base}.add"))
            prev = f"{base}.relu"
            in_c = width
    nodes += [
        AvgPoolNode("avgpool", prev, window=7, stride=1),
        FcNode(
            "fc",
            "avgpool",
            in_features=512,
            out_features=classes,
            weight=(
                rng.normal(0, 1 / np.sqrt(512), (classes, 512)).astype(np.float32)
                if with_weights
                else None
            ),
            bias=rng.normal(0, 0.05, classes).astype(np.float32) if with_weights else None,
        ),
    ]
    return FloatModel("resnet18", tuple(nodes))


def residual_rounding_witness() -> qg.QuantGraph:
    """Two-branch residual micro-graph whose executors differ by one code.

    The branches carry the values 4.4 and 2.4 at unit output scale: the
    integer path rounds each operand before adding (4 + 2 = 6) while the
    simulated path adds first and rounds once (round(6.8) = 7).
    """
    p_in = QuantParams(1.0, 0, 8)
    p_m = QuantParams(1.1, 0, 8)
    p_r = QuantParams(1.2, 0, 8)
    p_out = QuantParams(1.0, 0, 8)
    zero = np.zeros(1, dtype=np.int32)
    unit_weight = pack(np.array([1], dtype=np.int32), 8, Shape((1, 1)))
    nodes = (
        qg.QInput("input", (1, 1), p_in),
        qg.QFc(
            name="branch_m",
            parent="input",
            in_features=1,
            out_features=1,
            bits=8,
            weight=unit_weight,
            weight_scales=np.array([1.1]),
            bias_codes=zero.copy(),
            zp_correction=zero.copy(),
            requant=(dn(1.1 * 1.0 / 1.1),),
            z_in=0,
            params=p_m,
        ),
        qg.QFc(
            name="branch_r",
            parent="input",
            in_features=1,
            out_features=1,
            bits=8,
            weight=unit_weight,
            weight_scales=np.array([0.6]),
            bias_codes=zero.copy(),
            zp_correction=zero.copy(),
            requant=(dn(0.6 * 1.0 / 1.2),),
            z_in=0,
            params=p_r,
        ),
        qg.QAdd(
            name="join",
            lhs="branch_m",
            rhs="branch_r",
            dn_lhs=dn(1.1 / 1.0),
            dn_rhs=dn(1.2 / 1.0),
            z_lhs=0,
            z_rhs=0,
            params=p_out,
        ),
    )
    return qg.QuantGraph("residual_rounding_witness", nodes, {})


def witness_input():
    """Input that drives the witness branches to 4.4 and 2.4."""
    return np.array([[4.0]], dtype=np.float32)
