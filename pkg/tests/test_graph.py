import math
from fractions import Fraction

import numpy as np
import pytest

from dyq import nets
from dyq.errors import (
    DegenerateRange,
    MissingCalibration,
    NumericalError,
    ShapeError,
)
from dyq.graph import engine, manifest
from dyq.graph import model as fm
from dyq.instrument import OpCounter
from dyq.kernels import ConvSpec
from dyq.quantizer import QuantParams
from dyq.tensor import Shape, pack, unpack_array


# ---------------------------------------------------------------------------
# Batch-norm folding.
# ---------------------------------------------------------------------------


def _bn_conv(weight, bias, mean, sigma, gain, shift, spec):
    return fm.ConvNode(
        "conv",
        "input",
        spec,
        weight=weight,
        bias=bias,
        bn=fm.BatchNorm(mean=mean, sigma=sigma, gain=gain, shift=shift),
    )


class TestFoldBn:
    def test_identity_fold(self):
        spec = ConvSpec(1, 1, 1, 1)
        model = fm.FloatModel(
            "m",
            (
                fm.InputNode("input", (1, 1, 2, 2)),
                _bn_conv(np.ones((1, 1, 1, 1)), None, [0.0], [1.0], [1.0], [0.0], spec),
            ),
        )
        folded = fm.fold_bn(model)
        conv = folded.by_name["conv"]
        assert conv.bn is None
        np.testing.assert_array_equal(conv.weight, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(conv.bias, np.zeros(1))

    def test_single_value_fold(self):
        # gain 4, sigma 2, mean 2, shift 1 over w=1: fused must compute
        # 4*(3-2)/2 + 1 = 3 with w'=2 and b'=-3
        spec = ConvSpec(1, 1, 1, 1)
        model = fm.FloatModel(
            "m",
            (
                fm.InputNode("input", (1, 1, 1, 1)),
                _bn_conv(np.ones((1, 1, 1, 1)), None, [2.0], [2.0], [4.0], [1.0], spec),
            ),
        )
        folded = fm.fold_bn(model)
        conv = folded.by_name["conv"]
        assert conv.weight.ravel().tolist() == [2.0]
        assert conv.bias.tolist() == [-3.0]
        out = fm.float_forward(folded, np.full((1, 1, 1, 1), 3.0, dtype=np.float32))
        assert out.ravel().tolist() == [3.0]

    def test_absorbs_existing_bias(self):
        spec = ConvSpec(1, 1, 1, 1)
        model = fm.FloatModel(
            "m",
            (
                fm.InputNode("input", (1, 1, 1, 1)),
                _bn_conv(
                    np.ones((1, 1, 1, 1)), np.array([0.5]), [2.0], [2.0], [4.0], [1.0],
                    spec,
                ),
            ),
        )
        conv = fm.fold_bn(model).by_name["conv"]
        # b' = shift + (gain/sigma) * (bias - mean) = 1 + 2 * (0.5 - 2)
        assert conv.bias.tolist() == [-2.0]

    def test_sigma_floor_rejected(self):
        spec = ConvSpec(1, 1, 1, 1)
        model = fm.FloatModel(
            "m",
            (
                fm.InputNode("input", (1, 1, 1, 1)),
                _bn_conv(np.ones((1, 1, 1, 1)), None, [0.0], [1e-6], [1.0], [0.0], spec),
            ),
        )
        with pytest.raises(NumericalError):
            fm.fold_bn(model)

    def test_hundred_random_folds_match_unfused(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            ci, co = (int(v) for v in rng.integers(1, 6, 2))
            k = int(rng.choice([1, 3]))
            hw = int(rng.integers(k, k + 6))
            spec = ConvSpec(ci, co, k, k, padding=k // 2)
            model = fm.FloatModel(
                "m",
                (
                    fm.InputNode("input", (2, ci, hw, hw)),
                    _bn_conv(
                        rng.normal(0, 1, (co, ci, k, k)),
                        rng.normal(0, 1, co) if rng.random() < 0.5 else None,
                        rng.normal(0, 1, co),
                        rng.uniform(0.3, 2.0, co),
                        rng.uniform(0.3, 2.0, co) * rng.choice([-1, 1], co),
                        rng.normal(0, 1, co),
                        spec,
                    ),
                ),
            )
            x = rng.normal(0, 1, (2, ci, hw, hw)).astype(np.float32)
            ref = fm.float_forward(model, x)
            got = fm.float_forward(fm.fold_bn(model), x)
            scale = max(1.0, float(np.max(np.abs(ref))))
            worst = max(worst, float(np.max(np.abs(got - ref))) / scale)
        assert worst <= 1e-5


# ---------------------------------------------------------------------------
# Graph construction postconditions.
# ---------------------------------------------------------------------------


def _single_fc_model(rng):
    return fm.FloatModel(
        "fc_only",
        (
            fm.InputNode("input", (1, 6)),
            fm.FcNode(
                "fc",
                "input",
                6,
                4,
                weight=rng.uniform(-1, 1, (4, 6)).astype(np.float32),
                bias=rng.normal(0, 0.3, 4).astype(np.float32),
            ),
        ),
    )


class TestBuild:
    def test_single_fc_one_edge_per_output_channel(self):
        rng = np.random.default_rng(12)
        model = _single_fc_model(rng)
        calib = {"input": (-1.0, 1.0), "fc": (-2.0, 2.0)}
        g = engine.build_quant_graph(model, calib, {"fc": 8})
        node = g.by_name["fc"]
        assert len(node.requant) == 4

    def test_bias_scale_is_input_times_weight_scale(self):
        # biases quantize at exactly S_in * S_w per channel: reconstructing
        # them at that scale stays within half a step of the float bias
        rng = np.random.default_rng(13)
        model = _single_fc_model(rng)
        calib = {"input": (-1.0, 1.0), "fc": (-2.0, 2.0)}
        g = engine.build_quant_graph(model, calib, {"fc": 8})
        node = g.by_name["fc"]
        s_in = float(g.by_name["input"].params.scale)
        bias_scale = s_in * node.weight_scales
        recon = node.bias_codes * bias_scale
        np.testing.assert_allclose(
            recon, model.by_name["fc"].bias, atol=float(bias_scale.max()) / 2 + 1e-12
        )

    def test_bias_enters_accumulator_without_rescale(self):
        # zero weights isolate the bias path: the dequantized output must
        # reproduce the float bias to within one output quantization step,
        # which only holds if the bias code needs no dyadic edge of its own
        bias = np.array([0.75, -1.25, 2.0, 0.4], dtype=np.float32)
        model = fm.FloatModel(
            "bias_only",
            (
                fm.InputNode("input", (1, 6)),
                fm.FcNode(
                    "fc", "input", 6, 4,
                    weight=np.zeros((4, 6), dtype=np.float32),
                    bias=bias,
                ),
            ),
        )
        calib = {"input": (-1.0, 1.0), "fc": (-2.0, 2.0)}
        with pytest.warns(UserWarning):  # dead channels take unit scales
            g = engine.build_quant_graph(model, calib, {"fc": 8})
        x = np.full((1, 6), 0.5, dtype=np.float32)
        _, logits = engine.infer_true(g, x)
        step = float(g.by_name["fc"].params.scale)
        s_in = float(g.by_name["input"].params.scale)
        np.testing.assert_allclose(
            logits.data.ravel(), bias, atol=step / 2 + s_in / 2 + 1e-7
        )

    def test_residual_block_has_exactly_two_edges(self, tower_quantized_4bit):
        # the add itself carries exactly two dyadic edges, one per operand,
        # each approximating operand-scale / output-scale
        from dyq.dyadic import dn

        _, g, _ = tower_quantized_4bit
        add = g.by_name["block0_add"]
        s_out = float(add.params.scale)
        lhs_scale = float(g.by_name["stem"].params.scale)  # via stem_relu
        rhs_scale = float(g.by_name["block0_conv2"].params.scale)
        assert add.dn_lhs == dn(lhs_scale / s_out)
        assert add.dn_rhs == dn(rhs_scale / s_out)

    def test_concat_with_pool_branch_has_four_edges(self):
        model = nets.concat_net(seed=3)
        rng = np.random.default_rng(14)
        batches = [rng.normal(0, 1, (4, 4, 6, 6)).astype(np.float32) for _ in range(3)]
        calib = engine.calibrate(model, batches)
        g = engine.build_quant_graph(
            model, calib, engine.uniform_bit_config(model, 4)
        )
        join = g.by_name["join"]
        assert len(join.dns) == 4
        assert len(join.zs) == 4

    def test_input_site_is_8bit_symmetric(self, toy_quantized):
        _, g, _ = toy_quantized
        p = g.input_node.params
        assert p.bits == 8 and p.zero_point == 0

    def test_endpoint_pinning_default(self):
        model = nets.residual_tower(seed=0)
        config = engine.uniform_bit_config(model, 4)
        layers = model.weight_layers
        assert config[layers[0]] == 8 and config[layers[-1]] == 8
        assert all(config[n] == 4 for n in layers[1:-1])

    def test_missing_calibration_raises(self):
        rng = np.random.default_rng(15)
        model = _single_fc_model(rng)
        with pytest.raises(MissingCalibration):
            engine.build_quant_graph(model, {"input": (-1, 1)}, {"fc": 8})

    def test_degenerate_range_raises(self):
        rng = np.random.default_rng(16)
        model = _single_fc_model(rng)
        calib = {"input": (-1.0, 1.0), "fc": (0.0, 0.0)}
        with pytest.raises(DegenerateRange):
            engine.build_quant_graph(model, calib, {"fc": 8})

    def test_unfolded_bn_rejected(self):
        model = nets.toy_cnn(0)
        with pytest.raises(ShapeError):
            engine.build_quant_graph(model, {}, {})

    def test_site_width_follows_narrowest_consumer(self):
        # conv1 feeds conv2 through relu/pool; a 4-bit conv2 means conv1's
        # output codes must already be 4-bit (weight and activation widths
        # match per layer), while conv1's weights stay 8-bit
        model = fm.fold_bn(nets.toy_cnn(0))
        rng = np.random.default_rng(21)
        batches = [rng.normal(0, 1, (2, 3, 8, 8)).astype(np.float32) for _ in range(2)]
        calib = engine.calibrate(model, batches)
        g = engine.build_quant_graph(
            model, calib, {"conv1": 8, "conv2": 4, "fc": 8}
        )
        assert g.by_name["conv1"].bits == 8
        assert g.by_name["conv1"].weight.bits == 8
        assert g.by_name["conv1"].params.bits == 4
        assert g.by_name["conv2"].params.bits == 8  # fc consumes it at 8


# ---------------------------------------------------------------------------
# Executors.
# ---------------------------------------------------------------------------


class TestWitness:
    def test_true_rounds_per_operand(self):
        g = nets.residual_rounding_witness()
        _, _, _, sites = engine.run_true(g, nets.witness_input(), collect=True)
        assert sites["branch_m"].ravel().tolist() == [4]
        assert sites["branch_r"].ravel().tolist() == [2]
        assert sites["join"].ravel().tolist() == [6]

    def test_fake_rounds_after_accumulation(self):
        g = nets.residual_rounding_witness()
        _, sites = engine.run_fake(g, nets.witness_input(), collect=True)
        # output site has unit scale and zero offset: value == code
        assert sites["join"].ravel().tolist() == [7.0]

    def test_paths_differ_by_exactly_one_code(self):
        g = nets.residual_rounding_witness()
        _, _, _, true_sites = engine.run_true(g, nets.witness_input(), collect=True)
        _, fake_sites = engine.run_fake(g, nets.witness_input(), collect=True)
        true_code = int(true_sites["join"].ravel()[0])
        fake_code = int(round(float(fake_sites["join"].ravel()[0])))
        assert abs(fake_code - true_code) == 1


class TestTrueExecutor:
    def test_integer_only_instrumentation(self, toy_quantized):
        _, g, x = toy_quantized
        counter = OpCounter()
        engine.run_true(g, x, counter=counter)
        assert counter.float_ops == 0
        assert counter.total_int_ops > 0

    def test_deterministic_across_runs(self, toy_quantized):
        _, g, x = toy_quantized
        a, _ = engine.infer_true(g, x)
        b, _ = engine.infer_true(g, x)
        assert a.words.tolist() == b.words.tolist()

    def test_relu_identity_network(self):
        p = QuantParams(0.05, 0, 8)
        g = engine.QuantGraph(
            "relu_only",
            (engine.QInput("input", (1, 8), p), engine.QRelu("act", "input", p)),
            {},
        )
        x = np.linspace(-1, 1, 8, dtype=np.float32).reshape(1, 8)
        _, _, _, sites = engine.run_true(g, x, collect=True)
        np.testing.assert_array_equal(sites["act"], np.maximum(sites["input"], 0))

    def test_wrong_input_shape_rejected(self, toy_quantized):
        _, g, _ = toy_quantized
        with pytest.raises(ShapeError):
            engine.infer_true(g, np.zeros((1, 3, 9, 9), dtype=np.float32))

    def test_reentrant_across_threads(self, toy_quantized):
        # the graph is immutable and counters are per-invocation, so
        # concurrent runs on distinct inputs reproduce the serial results
        from concurrent.futures import ThreadPoolExecutor

        _, g, _ = toy_quantized
        rng = np.random.default_rng(23)
        inputs = [rng.normal(0, 1, (1, 3, 8, 8)).astype(np.float32) for _ in range(8)]
        serial = [engine.infer_true(g, x)[0].words.tolist() for x in inputs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(lambda x: engine.infer_true(g, x)[0].words.tolist(), inputs))
        assert parallel == serial

    def test_batched_input_matches_per_sample_runs(self, toy_quantized):
        _, g, _ = toy_quantized
        batch = np.random.default_rng(19).normal(0, 1, (3, 3, 8, 8)).astype(np.float32)
        together, _ = engine.infer_true(g, batch)
        stacked = np.concatenate(
            [
                unpack_array(engine.infer_true(g, batch[i : i + 1])[0])
                for i in range(3)
            ]
        )
        np.testing.assert_array_equal(unpack_array(together), stacked)

    def test_concat_net_runs_integer_only(self):
        model = nets.concat_net(seed=3)
        rng = np.random.default_rng(17)
        batches = [rng.normal(0, 1, (4, 4, 6, 6)).astype(np.float32) for _ in range(3)]
        calib = engine.calibrate(model, batches)
        g = engine.build_quant_graph(model, calib, engine.uniform_bit_config(model, 4))
        counter = OpCounter()
        x = rng.normal(0, 1, (1, 4, 6, 6)).astype(np.float32)
        _, logits, counter, _ = engine.run_true(g, x, counter=counter)
        assert counter.float_ops == 0
        ref = fm.float_forward(model, x)
        # 4-bit arithmetic tracks the float activations loosely but sanely
        assert np.corrcoef(ref.ravel(), logits.data.ravel())[0, 1] > 0.7


# ---------------------------------------------------------------------------
# Exact rational simulation of the integer pipeline.
# ---------------------------------------------------------------------------


def _round_half_away(fr: Fraction) -> int:
    if fr >= 0:
        return math.floor(fr + Fraction(1, 2))
    return -math.floor(-fr + Fraction(1, 2))


def _sim_requant(value: int, edge, zero_point, bits, fr=Fraction) -> int:
    scaled = _round_half_away(fr(value * edge.b, 2**edge.c)) + zero_point
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return min(max(scaled, lo), hi)


def rational_true_sim(g, input_codes):
    """Pure-Python integer re-execution of a QuantGraph (lists + Fractions)."""
    vals = {g.input_node.name: input_codes.tolist()}
    for node in g.nodes[1:]:
        if isinstance(node, engine.QConv):
            src = vals[node.parent]
            n = len(src)
            ci = len(src[0])
            h, w = len(src[0][0]), len(src[0][0][0])
            wcodes = unpack_array(node.weight).tolist()
            co = len(wcodes)
            s, p = node.spec.stride, node.spec.padding
            kh, kw = node.spec.kernel_h, node.spec.kernel_w
            oh = (h + 2 * p - kh) // s + 1
            ow = (w + 2 * p - kw) // s + 1
            bias = [
                int(node.bias_codes[o]) + int(node.zp_correction[o]) for o in range(co)
            ]
            out = []
            for b in range(n):
                planes = []
                for o in range(co):
                    plane = []
                    for y in range(oh):
                        row = []
                        for x in range(ow):
                            acc = bias[o]
                            for c in range(ci):
                                for i in range(kh):
                                    for j in range(kw):
                                        iy, ix = y * s - p + i, x * s - p + j
                                        v = (
                                            src[b][c][iy][ix]
                                            if 0 <= iy < h and 0 <= ix < w
                                            else node.z_in
                                        )
                                        acc += wcodes[o][c][i][j] * v
                            row.append(
                                _sim_requant(
                                    acc,
                                    node.requant[o],
                                    node.params.zero_point,
                                    node.params.bits,
                                )
                            )
                        plane.append(row)
                    planes.append(plane)
                out.append(planes)
            vals[node.name] = out
        elif isinstance(node, engine.QFc):
            src = vals[node.parent]
            flat = [_flatten(sample) for sample in src]
            wcodes = unpack_array(node.weight).tolist()
            out = []
            for sample in flat:
                row = []
                for o, wrow in enumerate(wcodes):
                    acc = int(node.bias_codes[o]) + int(node.zp_correction[o])
                    acc += sum(wv * xv for wv, xv in zip(wrow, sample))
                    row.append(
                        _sim_requant(
                            acc, node.requant[o], node.params.zero_point,
                            node.params.bits,
                        )
                    )
                out.append(row)
            vals[node.name] = out
        elif isinstance(node, engine.QRelu):
            z = node.params.zero_point
            vals[node.name] = _map_nested(vals[node.parent], lambda v: max(v, z))
        elif isinstance(node, engine.QMaxPool):
            src = vals[node.parent]
            n, c = len(src), len(src[0])
            h, w = len(src[0][0]), len(src[0][0][0])
            k, s, p = node.window, node.stride, node.padding
            oh = (h + 2 * p - k) // s + 1
            ow = (w + 2 * p - k) // s + 1
            out = []
            for b in range(n):
                planes = []
                for ch in range(c):
                    plane = []
                    for y in range(oh):
                        row = []
                        for x in range(ow):
                            best = None
                            for i in range(k):
                                for j in range(k):
                                    iy, ix = y * s - p + i, x * s - p + j
                                    if 0 <= iy < h and 0 <= ix < w:
                                        v = src[b][ch][iy][ix]
                                        best = v if best is None else max(best, v)
                            row.append(best)
                        plane.append(row)
                    planes.append(plane)
                out.append(planes)
            vals[node.name] = out
        elif isinstance(node, engine.QAdd):
            z_out = node.params.zero_point
            lo = -(1 << (node.params.bits - 1))
            hi = (1 << (node.params.bits - 1)) - 1

            def combine(a, b):
                sa = _round_half_away(Fraction((a - node.z_lhs) * node.dn_lhs.b, 2**node.dn_lhs.c))
                sb = _round_half_away(Fraction((b - node.z_rhs) * node.dn_rhs.b, 2**node.dn_rhs.c))
                return min(max(sa + sb + z_out, lo), hi)

            vals[node.name] = _zip_nested(vals[node.lhs], vals[node.rhs], combine)
        elif isinstance(node, engine.QAvgPool):
            src = vals[node.parent]
            n, c = len(src), len(src[0])
            h, w = len(src[0][0]), len(src[0][0][0])
            k, s = node.window, node.stride
            oh, ow = (h - k) // s + 1, (w - k) // s + 1
            area = k * k
            out = []
            for b in range(n):
                planes = []
                for ch in range(c):
                    plane = []
                    for y in range(oh):
                        row = []
                        for x in range(ow):
                            total = sum(
                                src[b][ch][y * s + i][x * s + j]
                                for i in range(k)
                                for j in range(k)
                            )
                            row.append(
                                _sim_requant(
                                    total - area * node.z_in,
                                    node.requant,
                                    node.params.zero_point,
                                    node.params.bits,
                                )
                            )
                        plane.append(row)
                    planes.append(plane)
                out.append(planes)
            vals[node.name] = out
        elif isinstance(node, engine.QConcat):
            out = None
            for branch, edge, z in zip(node.branches, node.dns, node.zs):
                scaled = _map_nested(
                    vals[branch],
                    lambda v, e=edge, zz=z: _sim_requant(
                        v - zz, e, node.params.zero_point, node.params.bits
                    ),
                )
                if out is None:
                    out = [[plane for plane in sample] for sample in scaled]
                else:
                    for sample, extra in zip(out, scaled):
                        sample.extend(extra)
            vals[node.name] = out
        else:
            raise AssertionError(f"sim does not model {type(node).__name__}")
    return vals


def _flatten(nested):
    if isinstance(nested, list):
        out = []
        for item in nested:
            out.extend(_flatten(item))
        return out
    return [nested]


def _map_nested(nested, fn):
    if isinstance(nested, list):
        return [_map_nested(v, fn) for v in nested]
    return fn(nested)


def _zip_nested(a, b, fn):
    if isinstance(a, list):
        return [_zip_nested(x, y, fn) for x, y in zip(a, b)]
    return fn(a, b)


class TestRationalOracle:
    def test_toy_cnn_bit_identical(self, toy_quantized):
        _, g, x = toy_quantized
        _, _, _, sites = engine.run_true(g, x, collect=True)
        input_codes = sites[g.input_node.name]
        sim = rational_true_sim(g, input_codes)
        for node in g.nodes[1:]:
            got = sites[node.name]
            want = np.array(sim[node.name], dtype=np.int64)
            np.testing.assert_array_equal(got.astype(np.int64), want, err_msg=node.name)

    def test_residual_tower_bit_identical(self, tower_quantized_4bit):
        _, g, x = tower_quantized_4bit
        _, _, _, sites = engine.run_true(g, x, collect=True)
        sim = rational_true_sim(g, sites[g.input_node.name])
        final = g.output_name
        np.testing.assert_array_equal(
            sites[final].astype(np.int64), np.array(sim[final], dtype=np.int64)
        )

    def test_concat_net_bit_identical(self):
        model = nets.concat_net(seed=3)
        rng = np.random.default_rng(22)
        batches = [rng.normal(0, 1, (4, 4, 6, 6)).astype(np.float32) for _ in range(3)]
        g = engine.build_quant_graph(
            model,
            engine.calibrate(model, batches),
            engine.uniform_bit_config(model, 4),
        )
        x = rng.normal(0, 1, (1, 4, 6, 6)).astype(np.float32)
        _, _, _, sites = engine.run_true(g, x, collect=True)
        sim = rational_true_sim(g, sites[g.input_node.name])
        for node in g.nodes[1:]:
            np.testing.assert_array_equal(
                sites[node.name].astype(np.int64),
                np.array(sim[node.name], dtype=np.int64),
                err_msg=node.name,
            )


# ---------------------------------------------------------------------------
# Divergence.
# ---------------------------------------------------------------------------


def _exact_dyadic_graph():
    # all rescale ratios are exactly 1: integer and simulated paths coincide
    w = pack(np.array([[1, 2], [3, -4]]), 8, Shape((2, 2)))
    p = QuantParams(1.0, 0, 8)
    zero2 = np.zeros(2, dtype=np.int32)
    nodes = (
        engine.QInput("input", (1, 2), p),
        engine.QFc(
            name="fc",
            parent="input",
            in_features=2,
            out_features=2,
            bits=8,
            weight=w,
            weight_scales=np.array([1.0, 1.0]),
            bias_codes=zero2.copy(),
            zp_correction=zero2.copy(),
            requant=(engine.dn(1.0), engine.dn(1.0)),
            z_in=0,
            params=p,
        ),
        engine.QRelu("act", "fc", p),
    )
    return engine.QuantGraph("exact_dyadic", nodes, {})


class TestDivergence:
    def test_exact_dyadic_network_all_zero(self):
        g = _exact_dyadic_graph()
        x = np.array([[3.0, -2.0]], dtype=np.float32)
        report = engine.measure_divergence(g, x)
        assert all(v == 0.0 for _, v in report)

    def test_report_covers_every_site_in_order(self, toy_quantized):
        _, g, x = toy_quantized
        report = engine.measure_divergence(g, x)
        assert [name for name, _ in report] == [n.name for n in g.nodes]

    def test_error_accumulates_at_4bit(self, tower_quantized_4bit):
        _, g, x = tower_quantized_4bit
        report = engine.measure_divergence(g, x)
        rows = dict(report.rows)
        first_layer = g.weight_layers[0]
        last = report.rows[-1][1]
        assert last > rows[first_layer]
        assert last > 0.01

    def test_csv_shape(self, toy_quantized):
        _, g, x = toy_quantized
        text = engine.measure_divergence(g, x).to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "layer,normalized_difference"
        assert len(lines) == 1 + len(g.nodes)


# ---------------------------------------------------------------------------
# Manifest round-trips.
# ---------------------------------------------------------------------------


class TestManifest:
    def test_float_model_roundtrip(self, tmp_path):
        model = nets.toy_cnn(0)
        path = tmp_path / "model.json"
        manifest.save_float_model(model, path)
        back = manifest.load_float_model(path)
        x = np.random.default_rng(18).normal(0, 1, (1, 3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(
            fm.float_forward(model, x), fm.float_forward(back, x)
        )

    def test_weightless_model_roundtrip(self, tmp_path):
        arch = nets.resnet18()
        path = tmp_path / "arch.json"
        manifest.save_float_model(arch, path)
        back = manifest.load_float_model(path)
        assert not back.has_weights
        assert back.infer_shapes() == arch.infer_shapes()
        assert not (tmp_path / "arch.weights").exists()

    def test_quant_graph_roundtrip_preserves_codes(self, toy_quantized, tmp_path):
        _, g, x = toy_quantized
        path = tmp_path / "quant.json"
        manifest.save_quant_graph(g, path)
        back = manifest.load_quant_graph(path)
        a, _ = engine.infer_true(g, x)
        b, _ = engine.infer_true(back, x)
        assert a.words.tolist() == b.words.tolist()

    def test_manifest_bytes_deterministic(self, toy_quantized, tmp_path):
        _, g, _ = toy_quantized
        path = tmp_path / "quant.json"
        manifest.save_quant_graph(g, path)
        first = (path.read_bytes(), (tmp_path / "quant.weights").read_bytes())
        manifest.save_quant_graph(g, path)
        second = (path.read_bytes(), (tmp_path / "quant.weights").read_bytes())
        assert first == second

    def test_witness_survives_roundtrip(self, tmp_path):
        g = nets.residual_rounding_witness()
        path = tmp_path / "witness.json"
        manifest.save_quant_graph(g, path)
        back = manifest.load_quant_graph(path)
        _, _, _, sites = engine.run_true(back, nets.witness_input(), collect=True)
        assert sites["join"].ravel().tolist() == [6]

    def test_bad_format_rejected(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"format": "other", "version": 1}')
        from dyq.errors import FormatError

        with pytest.raises(FormatError):
            manifest.load_float_model(path)
