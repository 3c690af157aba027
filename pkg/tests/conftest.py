import numpy as np
import pytest

from floodtransformer.model import ModelConfig

_ACCEPTANCE_LINES = []


def numeric_grad(f, arr: np.ndarray, index, h: float = 1e-4) -> float:
    """Central difference of scalar ``f()`` with respect to ``arr[index]``."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return ModelConfig()


@pytest.fixture
def small_config():
    # cheap config for gradient checks in unit tests
    return ModelConfig(image_size=(16, 16), patch_size=8, depth=1, heads=2, embed_dim=8,
                       cnn_channels=(4, 3, 2), fusion_channels=(4, 3, 2), seed=3)


@pytest.fixture
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{status}] {criterion}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
