import numpy as np
import pytest

from tmpsched.diffusion import build_noise_schedule, make_denoiser
from tmpsched.seeding import draw_samples

# (criterion, passed, detail) rows collected by the acceptance module
ACCEPTANCE = []


@pytest.fixture
def accept():
    def record(label: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def small_setup():
    """Linear model, cosine schedule and a handful of samples at T=6, d=4."""
    sched = build_noise_schedule("cosine", 6, 0.05, 0.999)
    model = make_denoiser(6, 4, gamma=0.0, seed=3)
    return model, sched, draw_samples(3, 5, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
