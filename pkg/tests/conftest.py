import numpy as np
import pytest

from ouriesz import random_model, standard_model


@pytest.fixture(scope="session")
def scalar():
    return standard_model(1)


@pytest.fixture(scope="session")
def std2():
    return standard_model(2)


def models(count, n_max=3, seed=2024, **kw):
    """Deterministic list of random models with ``n`` cycling through ``1..n_max``."""
    rng = np.random.default_rng(seed)
    return [random_model(rng, 1 + k % n_max, **kw) for k in range(count)]


_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records the verdict line for acceptance criterion ``k``."""

    def record(k, ok, detail=""):
        _ACCEPTANCE_LINES[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE_LINES[k])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[k])
