import numpy as np
import pytest

from dyq import nets
from dyq.graph import engine


@pytest.fixture(scope="session")
def toy_quantized():
    """Folded toy CNN quantized at uniform 8-bit, with its calibration data."""
    from dyq.graph import fold_bn

    model = fold_bn(nets.toy_cnn(seed=0))
    rng = np.random.default_rng(2)
    batches = [rng.normal(0, 1, (4, 3, 8, 8)).astype(np.float32) for _ in range(4)]
    calib = engine.calibrate(model, batches)
    config = engine.uniform_bit_config(model, 8)
    graph = engine.build_quant_graph(model, calib, config)
    x = rng.normal(0, 1, (1, 3, 8, 8)).astype(np.float32)
    return model, graph, x


@pytest.fixture(scope="session")
def tower_quantized_4bit():
    """Seeded 16-weight-layer residual tower at uniform 4-bit (ends at 8)."""
    model = nets.residual_tower(seed=0)
    rng = np.random.default_rng(7)
    batches = [rng.normal(0, 1, (4, 3, 6, 6)).astype(np.float32) for _ in range(4)]
    calib = engine.calibrate(model, batches)
    config = engine.uniform_bit_config(model, 4)
    graph = engine.build_quant_graph(model, calib, config)
    x = rng.normal(0, 1, (1, 3, 6, 6)).astype(np.float32)
    return model, graph, x
