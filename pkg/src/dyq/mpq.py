"""Mixed-precision planning: cost models, sensitivity, and an exact solver.

Costs per layer and bit choice: size (weight payload at b bits plus 32-bit
biases), bit-operations (b*b*MAC since weight and activation widths match
per layer), and ingested latency.  The objective is the Hessian-trace
weighted squared quantization perturbation, summed over layers; the solver
is a deterministic branch-and-bound that provably returns the optimum.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import Infeasible, MissingLatencyEntry, ShapeError
from .graph import model as fm
from .quantizer import round_ties_away, weight_channel_scales

MB = float(1 << 20)
GIGA = 1e9
BIAS_BYTES = 4  # biases stay 32-bit in every configuration


def mac_count(node, in_shape) -> int:
    """Multiply-accumulates of one weight layer given its input shape."""
    if isinstance(node, fm.ConvNode):
        _, _, h, w = in_shape
        oh, ow = node.spec.out_hw(h, w)
        return (
            oh
            * ow
            * node.spec.out_channels
            * node.spec.in_channels
            * node.spec.kernel_h
            * node.spec.kernel_w
        )
    if isinstance(node, fm.FcNode):
        return node.in_features * node.out_features
    raise ShapeError(f"{node.name} is not a weight layer")


def model_macs(model: fm.FloatModel) -> dict:
    shapes = model.infer_shapes()
    out = {}
    for node in model.nodes:
        if isinstance(node, fm.WEIGHT_KINDS):
            out[node.name] = mac_count(node, shapes[node.parent])
    return out


def weight_count(node) -> int:
    if isinstance(node, fm.ConvNode):
        s = node.spec
        return s.out_channels * s.in_channels * s.kernel_h * s.kernel_w
    if isinstance(node, fm.FcNode):
        return node.in_features * node.out_features
    raise ShapeError(f"{node.name} is not a weight layer")


def out_count(node) -> int:
    if isinstance(node, fm.ConvNode):
        return node.spec.out_channels
    return node.out_features


@dataclass(frozen=True)
class LayerCosts:
    """Per-(layer, bit-option) cost table; omega is filled by sensitivity."""

    layers: tuple
    bit_options: tuple
    size_bytes: np.ndarray  # (L, B)
    bops: np.ndarray  # (L, B)
    latency_ms: object = None  # (L, B) or None
    omega: object = None  # (L, B) or None

    def with_sensitivity(self, table) -> "LayerCosts":
        omega = table.omega if isinstance(table, SensitivityTable) else np.asarray(table)
        if omega.shape != self.size_bytes.shape:
            raise ShapeError("sensitivity table shape does not match cost table")
        return replace(self, omega=np.asarray(omega, dtype=np.float64))

    def totals(self, bits: dict) -> dict:
        cols = [self.bit_options.index(bits[name]) for name in self.layers]
        rows = range(len(self.layers))
        out = {
            "size_bytes": float(sum(self.size_bytes[i, c] for i, c in zip(rows, cols))),
            "bops": float(sum(self.bops[i, c] for i, c in zip(rows, cols))),
        }
        if self.latency_ms is not None:
            out["latency_ms"] = float(
                sum(self.latency_ms[i, c] for i, c in zip(rows, cols))
            )
        return out


def fp32_totals(model: fm.FloatModel) -> dict:
    """Unquantized baseline: 4-byte weights/biases and 32x32-bit operations."""
    macs = model_macs(model)
    size = 0.0
    bops = 0.0
    for node in model.nodes:
        if isinstance(node, fm.WEIGHT_KINDS):
            size += 4.0 * weight_count(node) + BIAS_BYTES * out_count(node)
            bops += 32.0 * 32.0 * macs[node.name]
    return {"size_bytes": size, "bops": bops}


def layer_costs(model: fm.FloatModel, bit_options=(4, 8), latency_table=None) -> LayerCosts:
    """Size/BOPS/latency per (layer, bit) pair for every weight layer."""
    bit_options = tuple(int(b) for b in bit_options)
    macs = model_macs(model)
    names = model.weight_layers
    by_name = model.by_name
    L, B = len(names), len(bit_options)
    size = np.zeros((L, B))
    bops = np.zeros((L, B))
    for i, name in enumerate(names):
        node = by_name[name]
        for j, b in enumerate(bit_options):
            size[i, j] = weight_count(node) * b / 8.0 + BIAS_BYTES * out_count(node)
            bops[i, j] = float(b) * float(b) * macs[name]
    latency = None
    if latency_table is not None:
        latency = np.zeros((L, B))
        for i, name in enumerate(names):
            for j, b in enumerate(bit_options):
                if (name, b) not in latency_table:
                    raise MissingLatencyEntry(f"no latency for ({name}, {b})")
                latency[i, j] = float(latency_table[(name, b)])
    return LayerCosts(tuple(names), bit_options, size, bops, latency)


@dataclass(frozen=True)
class SensitivityTable:
    """Hessian-trace weighted squared quantization perturbation per option."""

    layers: tuple
    bit_options: tuple
    traces: np.ndarray  # (L,)
    perturbations: np.ndarray  # (L, B), squared L2 of Q_b(W) - W
    omega: np.ndarray  # (L, B)


def quantization_perturbation(weight, bits) -> float:
    """Squared L2 distance between a weight tensor and its quantized twin."""
    w = np.asarray(weight, dtype=np.float64)
    scales = weight_channel_scales(w, bits)
    broad = scales.reshape((-1,) + (1,) * (w.ndim - 1))
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    codes = np.clip(round_ties_away(w / broad), lo, hi)
    deq = codes * broad
    return float(np.sum((deq - w) ** 2))


def sensitivity(weights: dict, traces: dict, bit_options=(4, 8), normalize="raw") -> SensitivityTable:
    """Omega[i, b] = trace_i * ||Q_b(W_i) - W_i||^2.

    ``normalize="per_param"`` divides each trace by the layer's parameter
    count before weighting.
    """
    if normalize not in ("raw", "per_param"):
        raise ValueError(f"unknown trace normalization {normalize!r}")
    bit_options = tuple(int(b) for b in bit_options)
    names = tuple(weights)
    L, B = len(names), len(bit_options)
    tr = np.zeros(L)
    pert = np.zeros((L, B))
    for i, name in enumerate(names):
        if name not in traces:
            raise ShapeError(f"no trace for layer {name!r}")
        t = float(traces[name])
        if t < 0:
            raise ValueError(f"negative trace for layer {name!r}")
        if normalize == "per_param":
            t /= float(np.asarray(weights[name]).size)
        tr[i] = t
        for j, b in enumerate(bit_options):
            pert[i, j] = quantization_perturbation(weights[name], b)
    return SensitivityTable(names, bit_options, tr, pert, tr[:, None] * pert)


def hutchinson_trace(grad_oracle, w, samples, seed=0, eps=None) -> float:
    """Stochastic trace estimate (1/N) * sum v^T H v with Rademacher probes.

    Hessian-vector products come from a central difference of the gradient:
    (g(w + eps*v) - g(w - eps*v)) / (2 eps).
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    w = np.asarray(w, dtype=np.float64)
    if eps is None:
        eps = 1e-3 * (1.0 + (float(np.max(np.abs(w))) if w.size else 0.0))
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(samples):
        v = (rng.integers(0, 2, size=w.shape) * 2 - 1).astype(np.float64)
        hv = (np.asarray(grad_oracle(w + eps * v), dtype=np.float64)
              - np.asarray(grad_oracle(w - eps * v), dtype=np.float64)) / (2.0 * eps)
        total += float(v.ravel() @ hv.ravel())
    return total / samples


@dataclass(frozen=True)
class BitConfig:
    """Solved per-layer bit assignment with its objective and cost totals."""

    bits: dict
    objective: float
    totals: dict

    def to_doc(self) -> dict:
        return {
            "layers": dict(self.bits),
            "objective": self.objective,
            "totals": dict(self.totals),
        }


_RESOURCE_KEYS = {"size": "size_bytes", "bops": "bops", "latency": "latency_ms"}


def solve_ilp(costs: LayerCosts, constraints: dict, pinned=None) -> BitConfig:
    """Exact minimizer of total sensitivity under resource budgets.

    Depth-first branch-and-bound over per-layer options, visited wider bits
    first; a node is cut when its admissible bound (accumulated objective
    plus, per remaining layer, the cheapest omega among options that still
    admit a min-resource completion) cannot beat the incumbent.  Ties keep
    the first solution found, i.e. the one preferring wider bits at the
    earliest layer.
    """
    if costs.omega is None:
        raise ShapeError("cost table has no sensitivity; call with_sensitivity first")
    pinned = dict(pinned or {})
    L = len(costs.layers)
    B = len(costs.bit_options)
    omega = costs.omega

    resources = []
    for key, field in _RESOURCE_KEYS.items():
        if constraints.get(key) is None:
            continue
        matrix = getattr(costs, field)
        if matrix is None:
            raise MissingLatencyEntry("latency constraint set but no latency table")
        limit = float(constraints[key])
        # absorb summation-order ulps so exact-boundary budgets stay feasible
        limit += 1e-12 * max(1.0, abs(limit))
        resources.append((key, np.asarray(matrix, dtype=np.float64), limit))

    # option columns per layer, wider bits first
    order = sorted(range(B), key=lambda j: -costs.bit_options[j])
    options = []
    for name in costs.layers:
        if name in pinned:
            if pinned[name] not in costs.bit_options:
                raise ShapeError(f"pinned bits {pinned[name]} not in {costs.bit_options}")
            options.append([costs.bit_options.index(pinned[name])])
        else:
            options.append(list(order))
    unknown = set(pinned) - set(costs.layers)
    if unknown:
        raise ShapeError(f"pinned layers not in cost table: {sorted(unknown)}")

    # suffix sums of the per-layer minimum of each resource
    min_res = [
        np.array([min(mat[i, j] for j in options[i]) for i in range(L)])
        for _, mat, _ in resources
    ]
    suffix_res = [np.concatenate([np.cumsum(m[::-1])[::-1], [0.0]]) for m in min_res]

    # definitively violated constraints: even the cheapest assignment busts them
    violated = [
        key for (key, _, limit), sfx in zip(resources, suffix_res) if sfx[0] > limit
    ]
    if violated:
        raise Infeasible(
            f"constraint(s) {violated} unsatisfiable even at the cheapest assignment",
            violated=violated,
        )

    best_obj = np.inf
    best_cols = None
    cols = [0] * L

    def bound(i, used):
        # admissible: per remaining layer, the cheapest omega among options
        # whose choice still admits a min-resource completion of the rest
        total = 0.0
        for j in range(i, L):
            cheapest = np.inf
            for col in options[j]:
                ok = True
                for r, (_, mat, limit) in enumerate(resources):
                    others_min = suffix_res[r][i] - min_res[r][j]
                    if used[r] + mat[j, col] + others_min > limit:
                        ok = False
                        break
                if ok and omega[j, col] < cheapest:
                    cheapest = omega[j, col]
            if not np.isfinite(cheapest):
                return np.inf
            total += cheapest
        return total

    def dfs(i, obj, used):
        nonlocal best_obj, best_cols
        if i == L:
            if obj < best_obj:
                best_obj = obj
                best_cols = cols[:]
            return
        if obj + bound(i, used) >= best_obj:
            return
        for col in options[i]:
            next_used = []
            feasible = True
            for r, (_, mat, limit) in enumerate(resources):
                u = used[r] + mat[i, col]
                if u + suffix_res[r][i + 1] > limit:
                    feasible = False
                    break
                next_used.append(u)
            if not feasible:
                continue
            cols[i] = col
            dfs(i + 1, obj + omega[i, col], tuple(next_used))
        return

    dfs(0, 0.0, tuple(0.0 for _ in resources))
    if best_cols is None:
        names = [key for key, _, _ in resources]
        raise Infeasible(
            f"constraints {names} jointly unsatisfiable", violated=names
        )
    bits = {
        name: costs.bit_options[best_cols[i]] for i, name in enumerate(costs.layers)
    }
    return BitConfig(bits, float(best_obj), costs.totals(bits))


@dataclass(frozen=True)
class ParetoReport:
    """One constrained solve per threshold, plus the per-layer trade-off data."""

    constraint: str
    rows: tuple  # dicts: threshold, objective, totals, bits
    layers: tuple
    speedup_share: object  # (L,) or None, INT4-vs-INT8 latency gain share
    sensitivity_gap: np.ndarray  # (L,), omega(narrow) - omega(wide)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["threshold", "objective", "size_bytes", "bops"]
        has_latency = any("latency_ms" in r["totals"] for r in self.rows)
        if has_latency:
            cols.append("latency_ms")
        cols += [f"bits.{name}" for name in self.layers]
        if self.speedup_share is not None:
            cols += [f"speedup_share.{name}" for name in self.layers]
        cols += [f"sensitivity_gap.{name}" for name in self.layers]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.rows:
            rec = [repr(row["threshold"]), repr(row["objective"])]
            rec += [repr(row["totals"]["size_bytes"]), repr(row["totals"]["bops"])]
            if has_latency:
                rec.append(repr(row["totals"].get("latency_ms", "")))
            rec += [str(row["bits"][name]) for name in self.layers]
            if self.speedup_share is not None:
                rec += [repr(float(v)) for v in self.speedup_share]
            rec += [repr(float(v)) for v in self.sensitivity_gap]
            writer.writerow(rec)
        return buf.getvalue()


def pareto_report(costs: LayerCosts, constraint: str, thresholds, pinned=None) -> ParetoReport:
    """Solve once per threshold of one constraint and tabulate the choices."""
    if constraint not in _RESOURCE_KEYS:
        raise ValueError(f"unknown constraint {constraint!r}")
    rows = []
    for threshold in thresholds:
        config = solve_ilp(costs, {constraint: threshold}, pinned=pinned)
        rows.append(
            {
                "threshold": float(threshold),
                "objective": config.objective,
                "totals": config.totals,
                "bits": config.bits,
            }
        )
    wide = int(np.argmax(costs.bit_options))
    narrow = int(np.argmin(costs.bit_options))
    share = None
    if costs.latency_ms is not None:
        gain = costs.latency_ms[:, wide] - costs.latency_ms[:, narrow]
        total = float(gain.sum())
        share = gain / total if total != 0.0 else np.zeros_like(gain)
    gap = costs.omega[:, narrow] - costs.omega[:, wide]
    return ParetoReport(constraint, tuple(rows), costs.layers, share, gap)


def load_latency_table(path) -> dict:
    """CSV with header ``layer,bits,ms`` -> {(layer, bits): ms}."""
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["layer", "bits", "ms"]:
            raise ShapeError(
                f"latency table header must be layer,bits,ms, got {reader.fieldnames}"
            )
        for rec in reader:
            table[(rec["layer"], int(rec["bits"]))] = float(rec["ms"])
    return table


def estimate_layer_traces(model: fm.FloatModel, batches, samples=8, seed=0) -> dict:
    """Finite-difference Hessian traces of a squared-output proxy loss.

    Intended for desk-scale models: the per-layer gradient is itself a
    central difference over every coordinate, so cost grows with parameter
    count.  Production flows ingest traces from a file instead.
    """
    batches = [np.asarray(b, dtype=np.float32) for b in batches]
    if not batches:
        raise ShapeError("trace estimation needs at least one batch")

    def loss(m):
        total = 0.0
        count = 0
        for b in batches:
            out = fm.float_forward(m, b).astype(np.float64)
            total += 0.5 * float(np.sum(out * out))
            count += out.shape[0]
        return total / count

    traces = {}
    for li, name in enumerate(model.weight_layers):
        node = model.by_name[name]
        base = np.asarray(node.weight, dtype=np.float64)

        def with_weights(w):
            from dataclasses import replace as _replace

            nodes = tuple(
                _replace(n, weight=w.reshape(base.shape).astype(np.float32))
                if n.name == name
                else n
                for n in model.nodes
            )
            return fm.FloatModel(model.name, nodes)

        def grad(w):
            step = 1e-3 * (1.0 + float(np.max(np.abs(w))))
            flat = w.ravel().copy()
            g = np.zeros_like(flat)
            for k in range(flat.size):
                up = flat.copy()
                up[k] += step
                down = flat.copy()
                down[k] -= step
                g[k] = (loss(with_weights(up)) - loss(with_weights(down))) / (2 * step)
            return g.reshape(w.shape)

        traces[name] = hutchinson_trace(
            grad, base, samples=samples, seed=seed + li
        )
    return traces
