import numpy as np
import pytest

from powerformer.tensor import Tensor, backward


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_difference(f, arr, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    """Norm-wise relative error, guarded for all-zero gradients."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else num / den


def tape_grad(build, *leaves):
    """Run ``build(*leaves)`` to a scalar, backprop, return each leaf grad."""
    for t in leaves:
        t.grad = None
    loss = build(*leaves)
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
