import sys

import numpy as np
import pytest

from fedgai.models import PerceptualEncoder
from fedgai.params import encode, export_params
from fedgai.synthdata import StyleProfile, generate_dataset
from fedgai.training import ClientState

PROFILES = {
    "A": StyleProfile(stroke_width_px=1.0, seed=1, name="A"),
    "B": StyleProfile(stroke_width_px=4.0, corner_rounding=0.5, seed=2, name="B"),
    "C": StyleProfile(stroke_width_px=2.0, jitter_amplitude_px=0.5, seed=3, name="C"),
    "E": StyleProfile(stroke_width_px=3.0, dash_probability=0.3, seed=4, name="E"),
}


@pytest.fixture(scope="session")
def small_encoder():
    return PerceptualEncoder(seed=0)


@pytest.fixture
def make_clients(small_encoder):
    """Factory for tiny 16x16 clients keyed by profile name."""

    def make(names=("A", "B"), n_pairs=6, resolution=16, seed=0):
        out = {}
        for i, name in enumerate(names):
            ds = generate_dataset(PROFILES[name], n_pairs, resolution)
            out[name] = ClientState(name, ds.images, ds.sketches, small_encoder, seed=seed * 100 + i)
        return out

    return make


def snapshot(client) -> bytes:
    return encode(export_params([client.generator, client.discriminator]))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
