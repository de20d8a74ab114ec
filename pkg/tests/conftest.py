import numpy as np
import pytest

from wocar.approximator import Net, NetSpec, init_params


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8))


def random_net(rng, widths, act="tanh", head="linear", scale=1.0):
    spec = NetSpec(tuple(widths), act, head)
    params = init_params(spec, seed=int(rng.integers(1 << 30))) * scale
    # non-zero biases exercise the bias paths
    params = params + 0.1 * rng.normal(size=params.shape)
    return Net(spec, params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
