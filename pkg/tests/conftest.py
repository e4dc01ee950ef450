import numpy as np
import pytest
import torch

from sarddpm.data import generate_synthetic_dataset
from sarddpm.schedule import make_linear
from sarddpm.unet import UNetConfig, build


def tiny_config(**changes) -> UNetConfig:
    base = dict(
        image_size=16,
        base_channels=8,
        channel_multipliers=(1, 2),
        res_blocks_total_per_side=2,
        attention_resolution=8,
        dropout_p=0.3,
        num_classes=3,
        num_timesteps=1000,
    )
    base.update(changes)
    return UNetConfig(**base)


@pytest.fixture
def linear():
    return make_linear(1000, 1e-4, 0.02)


@pytest.fixture
def tiny_model():
    return build(tiny_config(), seed=0)


@pytest.fixture(scope="session")
def synth16():
    return generate_synthetic_dataset(10, 8, 16, seed=0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, float, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, ok, seconds, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {name} ({seconds:.1f}s) {detail}".rstrip())
