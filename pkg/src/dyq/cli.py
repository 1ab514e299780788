"""Command-line front-end: calibrate, quantize, infer, diverge, allocate, report.

Exit codes are a stable contract: 0 success, 2 input error, 3 empty or
missing data, 4 numeric failure, 5 infeasible constraints.  ``DYQ_SEED``
overrides ``--seed`` when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import mpq
from .errors import (
    AccumulatorOverflow,
    DegenerateRange,
    DomainError,
    DyqError,
    FormatError,
    Infeasible,
    MissingCalibration,
    MissingLatencyEntry,
    NumericalError,
    RangeError,
    ShapeError,
)
from .graph import (
    build_quant_graph,
    calibrate,
    fold_bn,
    load_float_model,
    load_quant_graph,
    load_ranges,
    measure_divergence,
    run_fake,
    run_true,
    save_quant_graph,
    save_ranges,
    uniform_bit_config,
)
from .graph.manifest import dump_json
from .instrument import OpCounter
from .tensor import FloatTensor, read_container, write_container

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_DATA = 3
EXIT_NUMERIC = 4
EXIT_INFEASIBLE = 5

_ERROR_CODES = (
    ((Infeasible,), EXIT_INFEASIBLE),
    ((AccumulatorOverflow, NumericalError, DegenerateRange, DomainError), EXIT_NUMERIC),
    (
        (ShapeError, RangeError, FormatError, MissingCalibration, MissingLatencyEntry),
        EXIT_INPUT,
    ),
)


class _NoData(DyqError):
    pass


def _fail_code(exc) -> int:
    if isinstance(exc, _NoData):
        return EXIT_NO_DATA
    for kinds, code in _ERROR_CODES:
        if isinstance(exc, kinds):
            return code
    if isinstance(exc, (FileNotFoundError, NotADirectoryError, IsADirectoryError)):
        return EXIT_INPUT
    return EXIT_INPUT


def _seed(args) -> int:
    env = os.environ.get("DYQ_SEED")
    if env is not None:
        return int(env)
    return args.seed


def _data_batches(data_dir):
    if not os.path.isdir(data_dir):
        raise _NoData(f"data directory {data_dir!r} missing")
    names = sorted(
        f for f in os.listdir(data_dir) if os.path.isfile(os.path.join(data_dir, f))
    )
    if not names:
        raise _NoData(f"data directory {data_dir!r} is empty")
    for name in names:
        tensor = read_container(os.path.join(data_dir, name))
        if not isinstance(tensor, FloatTensor):
            raise ShapeError(f"{name}: calibration batches must be float tensors")
        yield tensor.data


def cmd_calibrate(args) -> int:
    model = load_float_model(args.model)
    model = fold_bn(model) if model.has_weights else model
    ranges = calibrate(model, _data_batches(args.data_dir), momentum=args.momentum)
    save_ranges(ranges, args.momentum, args.output)
    print(f"calibrated {len(ranges)} sites -> {args.output}")
    return EXIT_OK


def _load_bit_config(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    layers = doc["layers"] if isinstance(doc, dict) and "layers" in doc else doc
    return {name: int(bits) for name, bits in layers.items()}


def cmd_quantize(args) -> int:
    model = fold_bn(load_float_model(args.model))
    ranges = load_ranges(args.calibration)
    if args.bit_config:
        config = _load_bit_config(args.bit_config)
    else:
        config = uniform_bit_config(
            model, args.bits, pin_endpoints=not args.no_pin_endpoints
        )
    graph = build_quant_graph(model, ranges, config)
    save_quant_graph(graph, args.output)
    costs = mpq.layer_costs(model, bit_options=tuple(sorted(set(config.values()))))
    totals = costs.totals(config)
    print(f"quantized model -> {args.output}")
    for name in costs.layers:
        node = model.by_name[name]
        bytes_ = mpq.weight_count(node) * config[name] / 8.0
        bytes_ += mpq.BIAS_BYTES * mpq.out_count(node)
        print(f"  {name}: {config[name]}-bit, {int(bytes_)} bytes")
    print(f"total size: {totals['size_bytes'] / mpq.MB:.3f} MB")
    print(f"total bops: {totals['bops'] / mpq.GIGA:.3f} G")
    return EXIT_OK


def _read_input(path) -> FloatTensor:
    tensor = read_container(path)
    if not isinstance(tensor, FloatTensor):
        raise ShapeError("inference input must be a float tensor container")
    return tensor


def cmd_infer(args) -> int:
    graph = load_quant_graph(args.manifest)
    x = _read_input(args.input)
    if args.mode == "true":
        counter = OpCounter()
        _, logits, counter, _ = run_true(graph, x.data, counter=counter)
        print(f"float-ops: {counter.float_ops}")
    else:
        logits, _ = run_fake(graph, x.data)
    write_container(logits, args.output)
    flat = logits.data.reshape(logits.data.shape[0], -1)
    k = min(args.top_k, flat.shape[1])
    for row in range(flat.shape[0]):
        top = np.argsort(-flat[row])[:k]
        ranked = " ".join(f"{int(i)}:{flat[row, i]:.6f}" for i in top)
        print(f"top-{k}[{row}]: {ranked}")
    print(f"logits -> {args.output}")
    return EXIT_OK


def cmd_diverge(args) -> int:
    graph = load_quant_graph(args.manifest)
    x = _read_input(args.input)
    report = measure_divergence(graph, x.data)
    if args.format == "csv":
        text = report.to_csv()
    else:
        text = dump_json(
            {
                "rows": [
                    {"layer": name, "normalized_difference": value}
                    for name, value in report
                ]
            }
        )
    with open(args.output, "w") as fh:
        fh.write(text)
    print(f"divergence report ({len(report.rows)} sites) -> {args.output}")
    return EXIT_OK


def _size_arg_bytes(value):
    return None if value is None else float(value) * mpq.MB


def _bops_arg(value):
    return None if value is None else float(value) * mpq.GIGA


def cmd_allocate(args) -> int:
    arch = load_float_model(args.arch)
    constraints = {
        "size": _size_arg_bytes(args.size_limit),
        "bops": _bops_arg(args.bops_limit),
        "latency": args.latency_limit,
    }
    if not any(v is not None for v in constraints.values()) and not args.unconstrained:
        raise ShapeError("no constraint given; pass one or use --unconstrained")
    bit_options = tuple(int(b) for b in args.bit_options.split(","))
    latency = mpq.load_latency_table(args.latency_table) if args.latency_table else None
    if constraints["latency"] is not None and latency is None:
        raise MissingLatencyEntry("--latency-limit needs --latency-table")
    costs = mpq.layer_costs(arch, bit_options, latency)
    if not arch.has_weights:
        raise ShapeError(
            "architecture file carries no weights; sensitivity needs them"
        )
    if args.traces:
        with open(args.traces) as fh:
            traces = {k: float(v) for k, v in json.load(fh).items()}
    elif args.estimate:
        traces = mpq.estimate_layer_traces(
            arch,
            list(_data_batches(args.data)) if args.data else _default_probe(arch),
            samples=args.trace_samples,
            seed=_seed(args),
        )
    else:
        raise ShapeError("sensitivity needs --traces FILE or --estimate")
    weights = {n: arch.by_name[n].weight for n in arch.weight_layers}
    table = mpq.sensitivity(weights, traces, bit_options, normalize=args.trace_norm)
    costs = costs.with_sensitivity(table)
    pinned = {}
    if not args.no_pin_endpoints:
        pinned = {arch.weight_layers[0]: 8, arch.weight_layers[-1]: 8}
    config = mpq.solve_ilp(costs, constraints, pinned=pinned)
    with open(args.output, "w") as fh:
        fh.write(dump_json(config.to_doc()))
    print(f"objective: {config.objective!r}")
    print(f"total size: {config.totals['size_bytes'] / mpq.MB:.3f} MB")
    print(f"total bops: {config.totals['bops'] / mpq.GIGA:.3f} G")
    if "latency_ms" in config.totals:
        print(f"total latency: {config.totals['latency_ms']:.3f} ms")
    for name in costs.layers:
        print(f"  {name}: {config.bits[name]}-bit")
    print(f"bit config -> {args.output}")
    return EXIT_OK


def _default_probe(arch):
    rng = np.random.default_rng(0)
    shape = tuple(arch.input_node.shape)
    return [rng.normal(0, 1, shape).astype(np.float32) for _ in range(2)]


def cmd_report(args) -> int:
    arch = load_float_model(args.arch)
    bit_options = tuple(int(b) for b in args.bit_options.split(","))
    latency = mpq.load_latency_table(args.latency_table) if args.latency_table else None
    if args.sweep == "latency" and latency is None:
        raise MissingLatencyEntry("--sweep latency needs --latency-table")
    costs = mpq.layer_costs(arch, bit_options, latency)
    with open(args.traces) as fh:
        traces = {k: float(v) for k, v in json.load(fh).items()}
    if not arch.has_weights:
        raise ShapeError("architecture file carries no weights; sensitivity needs them")
    weights = {n: arch.by_name[n].weight for n in arch.weight_layers}
    costs = costs.with_sensitivity(
        mpq.sensitivity(weights, traces, bit_options, normalize=args.trace_norm)
    )
    thresholds = [float(v) for v in args.thresholds.split(",")]
    if args.sweep == "size":
        thresholds = [v * mpq.MB for v in thresholds]
    elif args.sweep == "bops":
        thresholds = [v * mpq.GIGA for v in thresholds]
    pinned = {}
    if not args.no_pin_endpoints:
        pinned = {arch.weight_layers[0]: 8, arch.weight_layers[-1]: 8}
    report = mpq.pareto_report(costs, args.sweep, thresholds, pinned=pinned)
    if args.format == "csv":
        text = report.to_csv()
    else:
        text = dump_json({"constraint": report.constraint, "rows": list(report.rows)})
    with open(args.output, "w") as fh:
        fh.write(text)
    print(f"sweep report ({len(report.rows)} rows) -> {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyq",
        description="Integer-only quantized inference and bit-width planning.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (DYQ_SEED wins)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "calibrate", parents=[common], help="track activation ranges over a data dir"
    )
    p.add_argument("model", help="float model JSON")
    p.add_argument("data_dir", help="directory of input tensor containers")
    p.add_argument("-o", "--output", required=True, help="ranges JSON to write")
    p.add_argument("--momentum", type=float, default=0.99)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", parents=[common], help="build a quantized manifest + weights")
    p.add_argument("model", help="float model JSON")
    p.add_argument("calibration", help="ranges JSON from calibrate")
    p.add_argument("-o", "--output", required=True, help="manifest JSON to write")
    p.add_argument("--bits", type=int, default=8, help="uniform bit-width")
    p.add_argument("--bit-config", help="per-layer bits JSON (from allocate)")
    p.add_argument("--no-pin-endpoints", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", parents=[common], help="run the integer or simulated executor")
    p.add_argument("manifest", help="quantized manifest JSON")
    p.add_argument("input", help="input tensor container")
    p.add_argument("-o", "--output", required=True, help="logits container to write")
    p.add_argument("--mode", choices=("true", "fake"), default="true")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("diverge", parents=[common], help="per-site fake-vs-true divergence report")
    p.add_argument("manifest")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_diverge)

    p = sub.add_parser("allocate", parents=[common], help="solve per-layer bit-widths under budgets")
    p.add_argument("arch", help="architecture/model JSON (weights required)")
    p.add_argument("--traces", help="trace table JSON {layer: trace}")
    p.add_argument("--estimate", action="store_true", help="estimate traces instead")
    p.add_argument("--data", help="probe data dir for --estimate")
    p.add_argument("--trace-samples", type=int, default=8)
    p.add_argument("--trace-norm", choices=("raw", "per_param"), default="raw")
    p.add_argument("--latency-table", help="CSV layer,bits,ms")
    p.add_argument("--size-limit", type=float, help="model size budget in MB")
    p.add_argument("--bops-limit", type=float, help="bit-operations budget in G")
    p.add_argument("--latency-limit", type=float, help="latency budget in ms")
    p.add_argument("--unconstrained", action="store_true")
    p.add_argument("--bit-options", default="4,8")
    p.add_argument("--no-pin-endpoints", action="store_true")
    p.add_argument("-o", "--output", required=True, help="bit config JSON to write")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("report", parents=[common], help="sweep one constraint and tabulate choices")
    p.add_argument("arch")
    p.add_argument("--traces", required=True)
    p.add_argument("--trace-norm", choices=("raw", "per_param"), default="raw")
    p.add_argument("--latency-table")
    p.add_argument("--sweep", choices=("size", "bops", "latency"), required=True)
    p.add_argument("--thresholds", required=True, help="comma-separated levels")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--bit-options", default="4,8")
    p.add_argument("--no-pin-endpoints", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DyqError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _fail_code(exc)


if __name__ == "__main__":
    sys.exit(main())
