import numpy as np
import pytest

from foresight.data import synthetic_gaussian_mixture
from foresight.nn import ReLU, Tanh, init_params, mlp


def central_difference(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (x is not modified)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def small_data():
    return synthetic_gaussian_mixture(k=3, n_per_class=20, dim=6, separation=3.0, seed=1)


@pytest.fixture
def small_spec():
    return mlp([6, 8, 5, 3], activation=Tanh, input_shape=(1, 1, 6))


@pytest.fixture
def small_relu_spec():
    return mlp([6, 8, 3], activation=ReLU, input_shape=(1, 1, 6))


@pytest.fixture
def small_params(small_spec):
    return init_params(small_spec, "kaiming", seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
