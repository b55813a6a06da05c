import numpy as np
import pytest
from hypothesis import settings

from anycell.numerics import finite_difference_grad, rel_error

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")

GRAD_TOL = 1e-4
SEEDS = range(10)


def param_fd(loss, param, h=1e-5):
    """Central differences of loss() w.r.t. param.value; the value is restored afterwards."""
    orig = param.value.copy()

    def f(v):
        param.value[...] = v
        return loss()

    try:
        return finite_difference_grad(f, orig, h)
    finally:
        param.value[...] = orig


def input_fd(loss, x, h=1e-5):
    return finite_difference_grad(loss, x, h)


def randomize_vectors(module, rng, std=0.1):
    """Give every 1-D parameter (biases, norms) random values so no unit sits exactly on a kink."""
    for _, p in module.named_params():
        if p.value.ndim == 1:
            p.value[...] = p.value + rng.normal(0.0, std, p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


__all__ = ["GRAD_TOL", "SEEDS", "param_fd", "input_fd", "randomize_vectors", "rel_error"]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
