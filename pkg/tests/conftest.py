import numpy as np
import pytest

from sfada.pipeline import AdaptationConfig
from sfada.synth import SOURCE_STYLE, TARGET_A_STYLE, SynthConfig, generate_domain


def tiny_domain(name="tiny", n=40, size=16, style=SOURCE_STYLE, seed=0):
    cfg = SynthConfig(n_samples=n, height=size, width=size, style=style, seed=seed,
                      blob_radius_range=(2.0, 4.0), name=name)
    return generate_domain(cfg)


def tiny_adaptation(**overrides):
    base = dict(resolution=16, pool_k=8, K=2, source_iters=20, stage1_iters=5, stage3_iters=5,
                batch_size=4, eval_every=10, seed=0, augment=False, precision="float64")
    base.update(overrides)
    return AdaptationConfig(**base)


@pytest.fixture(scope="session")
def tiny_source():
    return tiny_domain("source", 40, seed=1)


@pytest.fixture(scope="session")
def tiny_target():
    return tiny_domain("target", 40, style=TARGET_A_STYLE, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
