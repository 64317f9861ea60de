import os

import hypothesis
import numpy as np
import pytest

from src.data import SynthConfig, synth_generate
from src.model import NetworkConfig, bn, conv, lrelu, pool

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_layers():
    # 16x16 -> 4x4 features; rf stride 4, size 10, offset 1.5
    return (conv(4), bn(), lrelu(), pool(), conv(8), bn(), lrelu(), pool(), conv(1, kernel=1))


@pytest.fixture
def tiny_netcfg():
    return NetworkConfig(layers=tiny_layers(), input_shape=(3, 16, 16), seed=0)


TINY_SYNTH = SynthConfig(n_normal=12, n_anomalous=4, n_test_normal=6, n_test_anomalous=4, channels=3,
                         h=16, w=16, blob_sigma=(1.0, 1.5), amplitude=0.6, smoothing=1, seed=0)


@pytest.fixture(scope="session")
def tiny_split():
    return synth_generate(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_synth():
    return TINY_SYNTH
