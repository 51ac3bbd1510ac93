import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stemc import fixtures as fx
from stemc.quantizer import build_quantized_network, calibrate, quantize_tensor

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


class Bundle:
    """A fixture model quantized once per session, with its data."""

    def __init__(self, model, ds, stats, qnet, x_int):
        self.model = model
        self.ds = ds
        self.stats = stats
        self.qnet = qnet
        self.x_int = x_int


def _bundle(builder, lo, hi, n, data_seed, **quant_kwargs) -> Bundle:
    model = builder()
    ds = fx.labeled_dataset(model, n, data_seed, lo, hi)
    stats = calibrate(model, ds.inputs[:64], **quant_kwargs)
    qnet = build_quantized_network(model, stats, **quant_kwargs)
    x_int, _ = quantize_tensor(ds.inputs, qnet.input_params)
    return Bundle(model, ds, stats, qnet, x_int)


@pytest.fixture(scope="session")
def mlp_bundle():
    return _bundle(fx.make_mlp, 0.0, 1.0, 80, 42)


@pytest.fixture(scope="session")
def cnn_bundle():
    return _bundle(fx.make_cnn, 0.0, 1.0, 200, 101)


@pytest.fixture(scope="session")
def residual_bundle():
    return _bundle(fx.make_residual, 0.0, 1.0, 80, 43)


@pytest.fixture(scope="session")
def bias_bundle():
    return _bundle(fx.make_bias_stress, -0.5, 0.5, 80, 44)


@pytest.fixture(scope="session")
def widefan_bundle():
    # worst-case per-step accumulation: all weights at max magnitude
    return _bundle(fx.make_wide_fanin, 0.0, 1.0, 40, 45)


@pytest.fixture
def rng():
    # function-scoped: tests must not share generator state
    return np.random.default_rng(2024)
