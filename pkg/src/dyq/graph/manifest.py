"""On-disk formats: model/architecture JSON plus a weights container file.

Both the float model and the quantized model share one topology schema; the
quantized manifest adds per-layer bits, quantization parameters, dyadic
rescale edges, and calibration ranges.  Tensor payloads live in a sibling
weights file holding back-to-back tensor containers addressed by byte
offset, so a manifest with no tensors needs no weights file at all.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..dyadic import DyadicScale
from ..errors import FormatError
from ..kernels import ConvSpec
from ..quantizer import QuantParams
from ..tensor import FloatTensor, PackedTensor, Shape, pack, read_container, write_container
from . import engine as qg
from . import model as fm

FLOAT_FORMAT = "dyq-float-model"
QUANT_FORMAT = "dyq-quant-model"
SCHEMA_VERSION = 1


def dump_json(obj) -> str:
    """Canonical JSON: sorted keys, two-space indent, repr floats."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_tensors(tensors: dict, weights_path):
    index = {}
    with open(weights_path, "wb") as fh:
        for name in sorted(tensors):
            index[name] = {"offset": fh.tell()}
            write_container(tensors[name], fh)
    return index


class _TensorFile:
    def __init__(self, path):
        if not os.path.exists(path):
            raise FormatError(f"weights file {path!r} missing")
        self.path = path

    def read(self, offset):
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            return read_container(fh)


def _weights_sidecar(json_path) -> str:
    stem, _ = os.path.splitext(json_path)
    return stem + ".weights"


# ---------------------------------------------------------------------------
# Float model.
# ---------------------------------------------------------------------------


def _float_layer_record(node):
    if isinstance(node, fm.InputNode):
        return {"kind": "input", "name": node.name, "shape": list(node.shape)}
    if isinstance(node, fm.ConvNode):
        return {
            "kind": "conv",
            "name": node.name,
            "parent": node.parent,
            "in_channels": node.spec.in_channels,
            "out_channels": node.spec.out_channels,
            "kernel_h": node.spec.kernel_h,
            "kernel_w": node.spec.kernel_w,
            "stride": node.spec.stride,
            "padding": node.spec.padding,
            "has_bias": node.bias is not None,
            "has_bn": node.bn is not None,
        }
    if isinstance(node, fm.FcNode):
        return {
            "kind": "fc",
            "name": node.name,
            "parent": node.parent,
            "in_features": node.in_features,
            "out_features": node.out_features,
            "has_bias": node.bias is not None,
        }
    if isinstance(node, fm.ReluNode):
        return {"kind": "relu", "name": node.name, "parent": node.parent}
    if isinstance(node, fm.MaxPoolNode):
        return {
            "kind": "maxpool",
            "name": node.name,
            "parent": node.parent,
            "window": node.window,
            "stride": node.stride,
            "padding": node.padding,
        }
    if isinstance(node, fm.AvgPoolNode):
        return {
            "kind": "avgpool",
            "name": node.name,
            "parent": node.parent,
            "window": node.window,
            "stride": node.stride,
        }
    if isinstance(node, fm.AddNode):
        return {"kind": "add", "name": node.name, "lhs": node.lhs, "rhs": node.rhs}
    if isinstance(node, fm.ConcatNode):
        return {"kind": "concat", "name": node.name, "branches": list(node.branches)}
    raise FormatError(f"cannot serialize node type {type(node).__name__}")


def save_float_model(model: fm.FloatModel, json_path):
    tensors = {}
    for node in model.nodes:
        if isinstance(node, fm.ConvNode) and node.weight is not None:
            tensors[f"{node.name}.weight"] = FloatTensor.from_array(node.weight)
            if node.bias is not None:
                tensors[f"{node.name}.bias"] = FloatTensor.from_array(node.bias)
            if node.bn is not None:
                for field in ("mean", "sigma", "gain", "shift"):
                    tensors[f"{node.name}.bn_{field}"] = FloatTensor.from_array(
                        getattr(node.bn, field)
                    )
        elif isinstance(node, fm.FcNode) and node.weight is not None:
            tensors[f"{node.name}.weight"] = FloatTensor.from_array(node.weight)
            if node.bias is not None:
                tensors[f"{node.name}.bias"] = FloatTensor.from_array(node.bias)
    doc = {
        "format": FLOAT_FORMAT,
        "version": SCHEMA_VERSION,
        "name": model.name,
        "layers": [_float_layer_record(n) for n in model.nodes],
    }
    if tensors:
        weights_path = _weights_sidecar(json_path)
        doc["weights_file"] = os.path.basename(weights_path)
        doc["tensors"] = _write_tensors(tensors, weights_path)
    else:
        doc["weights_file"] = None
        doc["tensors"] = {}
    with open(json_path, "w") as fh:
        fh.write(dump_json(doc))


def _load_doc(json_path, expect_format):
    try:
        with open(json_path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: not valid JSON ({exc})") from exc
    if doc.get("format") != expect_format:
        raise FormatError(
            f"{json_path}: format {doc.get('format')!r}, expected {expect_format!r}"
        )
    if doc.get("version") != SCHEMA_VERSION:
        raise FormatError(f"{json_path}: unsupported schema version")
    return doc


def _tensor_reader(doc, json_path):
    index = doc.get("tensors") or {}
    if not index:
        return lambda name: None
    weights = _TensorFile(
        os.path.join(os.path.dirname(os.path.abspath(json_path)), doc["weights_file"])
    )

    def reader(name):
        if name not in index:
            return None
        return weights.read(index[name]["offset"])

    return reader


def load_float_model(json_path) -> fm.FloatModel:
    doc = _load_doc(json_path, FLOAT_FORMAT)
    read = _tensor_reader(doc, json_path)

    def arr(name):
        t = read(name)
        return None if t is None else t.data

    nodes = []
    for rec in doc["layers"]:
        kind = rec["kind"]
        if kind == "input":
            nodes.append(fm.InputNode(rec["name"], tuple(rec["shape"])))
        elif kind == "conv":
            spec = ConvSpec(
                rec["in_channels"],
                rec["out_channels"],
                rec["kernel_h"],
                rec["kernel_w"],
                rec["stride"],
                rec["padding"],
            )
            bn = None
            if rec["has_bn"] and arr(f"{rec['name']}.bn_mean") is not None:
                bn = fm.BatchNorm(
                    arr(f"{rec['name']}.bn_mean"),
                    arr(f"{rec['name']}.bn_sigma"),
                    arr(f"{rec['name']}.bn_gain"),
                    arr(f"{rec['name']}.bn_shift"),
                )
            nodes.append(
                fm.ConvNode(
                    rec["name"],
                    rec["parent"],
                    spec,
                    weight=arr(f"{rec['name']}.weight"),
                    bias=arr(f"{rec['name']}.bias") if rec["has_bias"] else None,
                    bn=bn,
                )
            )
        elif kind == "fc":
            nodes.append(
                fm.FcNode(
                    rec["name"],
                    rec["parent"],
                    rec["in_features"],
                    rec["out_features"],
                    weight=arr(f"{rec['name']}.weight"),
                    bias=arr(f"{rec['name']}.bias") if rec["has_bias"] else None,
                )
            )
        elif kind == "relu":
            nodes.append(fm.ReluNode(rec["name"], rec["parent"]))
        elif kind == "maxpool":
            nodes.append(
                fm.MaxPoolNode(
                    rec["name"], rec["parent"], rec["window"], rec["stride"],
                    rec["padding"],
                )
            )
        elif kind == "avgpool":
            nodes.append(
                fm.AvgPoolNode(rec["name"], rec["parent"], rec["window"], rec["stride"])
            )
        elif kind == "add":
            nodes.append(fm.AddNode(rec["name"], rec["lhs"], rec["rhs"]))
        elif kind == "concat":
            nodes.append(fm.ConcatNode(rec["name"], tuple(rec["branches"])))
        else:
            raise FormatError(f"unknown layer kind {kind!r}")
    return fm.FloatModel(doc["name"], tuple(nodes))


# ---------------------------------------------------------------------------
# Quantized model.
# ---------------------------------------------------------------------------


def _params_record(p: QuantParams):
    scale = p.scale.tolist() if isinstance(p.scale, np.ndarray) else float(p.scale)
    return {
        "scale": scale,
        "zero_point": p.zero_point,
        "bits": p.bits,
        "granularity": p.granularity,
    }


def _params_from(rec) -> QuantParams:
    scale = rec["scale"]
    if isinstance(scale, list):
        scale = np.asarray(scale, dtype=np.float64)
    return QuantParams(scale, rec["zero_point"], rec["bits"], rec["granularity"])


def _dn_record(e: DyadicScale):
    return {"b": e.b, "c": e.c}


def _dn_from(rec) -> DyadicScale:
    return DyadicScale(rec["b"], rec["c"])


def save_quant_graph(graph: qg.QuantGraph, json_path):
    tensors = {}
    layers = []
    for node in graph.nodes:
        if isinstance(node, qg.QInput):
            layers.append(
                {
                    "kind": "input",
                    "name": node.name,
                    "shape": list(node.shape),
                    "params": _params_record(node.params),
                }
            )
        elif isinstance(node, (qg.QConv, qg.QFc)):
            tensors[f"{node.name}.qweight"] = node.weight
            tensors[f"{node.name}.bias_codes"] = pack(
                node.bias_codes, 32, Shape((node.bias_codes.size,))
            )
            tensors[f"{node.name}.zp_correction"] = pack(
                node.zp_correction, 32, Shape((node.zp_correction.size,))
            )
            rec = {
                "name": node.name,
                "parent": node.parent,
                "bits": node.bits,
                "weight_scales": node.weight_scales.tolist(),
                "requant": [_dn_record(e) for e in node.requant],
                "z_in": node.z_in,
                "params": _params_record(node.params),
            }
            if isinstance(node, qg.QConv):
                rec.update(
                    kind="conv",
                    in_channels=node.spec.in_channels,
                    out_channels=node.spec.out_channels,
                    kernel_h=node.spec.kernel_h,
                    kernel_w=node.spec.kernel_w,
                    stride=node.spec.stride,
                    padding=node.spec.padding,
                )
            else:
                rec.update(
                    kind="fc",
                    in_features=node.in_features,
                    out_features=node.out_features,
                )
            layers.append(rec)
        elif isinstance(node, qg.QRelu):
            layers.append({"kind": "relu", "name": node.name, "parent": node.parent})
        elif isinstance(node, qg.QMaxPool):
            layers.append(
                {
                    "kind": "maxpool",
                    "name": node.name,
                    "parent": node.parent,
                    "window": node.window,
                    "stride": node.stride,
                    "padding": node.padding,
                }
            )
        elif isinstance(node, qg.QAvgPool):
            layers.append(
                {
                    "kind": "avgpool",
                    "name": node.name,
                    "parent": node.parent,
                    "window": node.window,
                    "stride": node.stride,
                    "requant": _dn_record(node.requant),
                    "z_in": node.z_in,
                    "params": _params_record(node.params),
                }
            )
        elif isinstance(node, qg.QAdd):
            layers.append(
                {
                    "kind": "add",
                    "name": node.name,
                    "lhs": node.lhs,
                    "rhs": node.rhs,
                    "dn_lhs": _dn_record(node.dn_lhs),
                    "dn_rhs": _dn_record(node.dn_rhs),
                    "z_lhs": node.z_lhs,
                    "z_rhs": node.z_rhs,
                    "params": _params_record(node.params),
                }
            )
        elif isinstance(node, qg.QConcat):
            layers.append(
                {
                    "kind": "concat",
                    "name": node.name,
                    "branches": list(node.branches),
                    "dns": [_dn_record(e) for e in node.dns],
                    "zs": list(node.zs),
                    "params": _params_record(node.params),
                }
            )
        else:
            raise FormatError(f"cannot serialize node type {type(node).__name__}")
    weights_path = _weights_sidecar(json_path)
    doc = {
        "format": QUANT_FORMAT,
        "version": SCHEMA_VERSION,
        "name": graph.name,
        "layers": layers,
        "weights_file": os.path.basename(weights_path),
        "tensors": _write_tensors(tensors, weights_path),
        "calibration": {
            k: {"r_min": v[0], "r_max": v[1]} for k, v in graph.calibration.items()
        },
    }
    with open(json_path, "w") as fh:
        fh.write(dump_json(doc))


def load_quant_graph(json_path) -> qg.QuantGraph:
    doc = _load_doc(json_path, QUANT_FORMAT)
    read = _tensor_reader(doc, json_path)
    nodes = []
    by_name = {}

    def inherited(parent_name):
        node = by_name[parent_name]
        while isinstance(node, (qg.QRelu, qg.QMaxPool)):
            node = by_name[node.parent]
        return node.params

    for rec in doc["layers"]:
        kind = rec["kind"]
        if kind == "input":
            node = qg.QInput(rec["name"], tuple(rec["shape"]), _params_from(rec["params"]))
        elif kind in ("conv", "fc"):
            weight = read(f"{rec['name']}.qweight")
            bias_codes = read(f"{rec['name']}.bias_codes")
            zp_corr = read(f"{rec['name']}.zp_correction")
            if not isinstance(weight, PackedTensor):
                raise FormatError(f"{rec['name']}: missing packed weights")
            for t, what in ((bias_codes, "bias codes"), (zp_corr, "zero-point correction")):
                if not isinstance(t, PackedTensor) or t.bits != 32:
                    raise FormatError(f"{rec['name']}: missing 32-bit {what}")
            common = dict(
                name=rec["name"],
                parent=rec["parent"],
                bits=rec["bits"],
                weight=weight,
                weight_scales=np.asarray(rec["weight_scales"], dtype=np.float64),
                bias_codes=bias_codes.words.copy(),
                zp_correction=zp_corr.words.copy(),
                requant=tuple(_dn_from(e) for e in rec["requant"]),
                z_in=rec["z_in"],
                params=_params_from(rec["params"]),
            )
            if kind == "conv":
                spec = ConvSpec(
                    rec["in_channels"],
                    rec["out_channels"],
                    rec["kernel_h"],
                    rec["kernel_w"],
                    rec["stride"],
                    rec["padding"],
                )
                node = qg.QConv(spec=spec, **common)
            else:
                node = qg.QFc(
                    in_features=rec["in_features"],
                    out_features=rec["out_features"],
                    **common,
                )
        elif kind == "relu":
            node = qg.QRelu(rec["name"], rec["parent"], inherited(rec["parent"]))
        elif kind == "maxpool":
            node = qg.QMaxPool(
                rec["name"],
                rec["parent"],
                rec["window"],
                rec["stride"],
                rec["padding"],
                inherited(rec["parent"]),
            )
        elif kind == "avgpool":
            node = qg.QAvgPool(
                rec["name"],
                rec["parent"],
                rec["window"],
                rec["stride"],
                _dn_from(rec["requant"]),
                rec["z_in"],
                _params_from(rec["params"]),
            )
        elif kind == "add":
            node = qg.QAdd(
                rec["name"],
                rec["lhs"],
                rec["rhs"],
                _dn_from(rec["dn_lhs"]),
                _dn_from(rec["dn_rhs"]),
                rec["z_lhs"],
                rec["z_rhs"],
                _params_from(rec["params"]),
            )
        elif kind == "concat":
            node = qg.QConcat(
                rec["name"],
                tuple(rec["branches"]),
                tuple(_dn_from(e) for e in rec["dns"]),
                tuple(rec["zs"]),
                _params_from(rec["params"]),
            )
        else:
            raise FormatError(f"unknown layer kind {kind!r}")
        nodes.append(node)
        by_name[node.name] = node
    calib = {
        k: (v["r_min"], v["r_max"]) for k, v in (doc.get("calibration") or {}).items()
    }
    return qg.QuantGraph(doc["name"], tuple(nodes), calib)


# ---------------------------------------------------------------------------
# Calibration ranges.
# ---------------------------------------------------------------------------


def save_ranges(ranges: dict, momentum, path):
    doc = {
        "momentum": momentum,
        "sites": {
            name: {"r_min": float(lo), "r_max": float(hi)}
            for name, (lo, hi) in ranges.items()
        },
    }
    with open(path, "w") as fh:
        fh.write(dump_json(doc))


def load_ranges(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if "sites" not in doc:
        raise FormatError(f"{path}: missing 'sites' block")
    return {k: (v["r_min"], v["r_max"]) for k, v in doc["sites"].items()}
