import sys

import numpy as np
import pytest
from hypothesis import settings

from dvq import grad_core as gc

settings.register_profile("dvq", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("dvq")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def contract(out: gc.Value, weights: np.ndarray) -> gc.Value:
    """Scalar ``sum(out * weights)`` so every output entry gets a distinct upstream gradient."""
    return gc.sum_last(gc.reshape(gc.mul(out, gc.Value(weights)), (-1,)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
