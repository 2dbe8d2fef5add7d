import numpy as np
import pytest

from powerformer.optim import Adam, AdamState, adam_step
from powerformer.tensor import ShapeError, backward

from conftest import leaf


def test_zero_gradient_leaves_params():
    p = leaf([1.0, -2.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_is_lr_sized():
    # m_hat = g, v_hat = g^2 on step one, so the step is lr * g / (|g| + eps)
    p = leaf([0.5])
    adam_step([p], [np.array([1.0])], AdamState.for_params([p]), lr=0.1)
    assert p.data[0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_quadratic_matches_reference_adam():
    # 100 steps of torch.optim.Adam(lr=0.1) on (w - 3)^2 from w = 0 ends at this value
    p = leaf([0.0])
    opt = Adam([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        backward(((p - 3.0) ** 2).sum())
        opt.step()
    assert p.data[0] == pytest.approx(2.9806554375278123, abs=1e-12)
    assert abs(p.data[0] - 3.0) < 0.05


def test_deterministic():
    out = []
    for _ in range(2):
        p = leaf([0.3, 0.1])
        st = AdamState.for_params([p])
        for g in ([1.0, -2.0], [0.5, 0.5], [-1.0, 3.0]):
            adam_step([p], [np.array(g)], st, lr=0.01)
        out.append(p.data.tobytes())
    assert out[0] == out[1]


def test_shape_mismatch():
    p = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], AdamState.for_params([p]), lr=0.1)
