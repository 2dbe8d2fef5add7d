import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerformer.patching import (
    NormStats,
    PatchConfig,
    denormalize,
    instance_normalize,
    patch_count,
    patch_index,
    patchify,
)
from powerformer.tensor import ContractError, ShapeError, Tensor, backward

from conftest import leaf


@pytest.mark.parametrize("T, expected", [(512, 63), (336, 41), (16, 1), (23, 1), (24, 2)])
def test_patch_count(T, expected):
    assert patch_count(T, 16, 8) == expected


def test_patch_longer_than_window():
    with pytest.raises(ContractError):
        patch_count(8, 16, 8)
    with pytest.raises(ContractError):
        PatchConfig(patch_len=20, seq_len=10)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.integers(1, 32), st.integers(1, 16))
def test_windows_tile_in_bounds(T, p, s):
    if p > T:
        return
    cfg = PatchConfig(patch_len=p, stride=s, seq_len=T, embed_width=4)
    idx = patch_index(cfg)
    assert idx.shape == (cfg.n_patches, p)
    assert idx.min() == 0 and idx.max() < T
    np.testing.assert_array_equal(idx[:, 0], np.arange(cfg.n_patches) * s)


class TestNormalize:
    def test_constant(self):
        z, stats = instance_normalize(np.full(10, 3.0))
        assert not np.any(z)
        assert stats.std[0] == 1e-5

    def test_already_standard(self):
        z, _ = instance_normalize(np.array([-1.0, 1.0]))
        np.testing.assert_array_equal(z, [-1.0, 1.0])

    def test_too_short(self):
        with pytest.raises(ContractError):
            instance_normalize(np.array([1.0]))

    def test_random_moments(self, rng):
        z, _ = instance_normalize(rng.normal(3, 5, size=(4, 200)))
        assert np.all(np.abs(z.mean(-1)) < 1e-10)
        assert np.all(np.abs(z.std(-1) - 1) < 1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 400))
    def test_round_trip(self, seed, T):
        x = np.random.default_rng(seed).normal(0, 10, size=(3, T))
        z, stats = instance_normalize(x)
        assert np.max(np.abs(denormalize(z, stats) - x)) < 1e-10

    def test_denormalize_identity_and_zero(self):
        y = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(denormalize(y, NormStats(np.zeros((1, 1)), np.ones((1, 1)))), y)
        out = denormalize(np.zeros((1, 3)), NormStats(np.full((1, 1), 4.5), np.full((1, 1), 2.0)))
        np.testing.assert_array_equal(out, [[4.5, 4.5, 4.5]])

    def test_stats_detached_for_tensor(self, rng):
        x = leaf(rng.normal(size=(6,)))
        z, stats = instance_normalize(x)
        backward(z.sum())
        np.testing.assert_allclose(x.grad, 1.0 / stats.std.ravel()[0] * np.ones(6))


class TestPatchify:
    def test_whole_window_single_patch(self, rng):
        cfg = PatchConfig(patch_len=8, stride=8, seq_len=8, embed_width=3)
        w = Tensor(rng.normal(size=(8, 3)))
        z = rng.normal(size=(2, 8))
        out = patchify(z, cfg, w, Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data[:, 0], z @ w.data, atol=1e-14)

    def test_matches_convolution(self, rng):
        cfg = PatchConfig(patch_len=4, stride=3, seq_len=17, embed_width=2)
        w, pos, b = rng.normal(size=(4, 2)), rng.normal(size=(5, 2)), rng.normal(size=2)
        z = rng.normal(size=(3, 17))
        out = patchify(z, cfg, Tensor(w), Tensor(pos), Tensor(b)).data
        for c in range(3):
            for k in range(cfg.n_patches):
                ref = z[c, 3 * k:3 * k + 4] @ w + b + pos[k]
                np.testing.assert_allclose(out[c, k], ref, atol=1e-14)

    def test_shape_errors(self, rng):
        cfg = PatchConfig(patch_len=4, stride=2, seq_len=10, embed_width=2)
        with pytest.raises(ShapeError):
            patchify(np.zeros(11), cfg, Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            patchify(np.zeros(10), cfg, Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))))

    def test_dropped_remainder_is_unread(self, rng):
        cfg = PatchConfig(patch_len=4, stride=3, seq_len=12, embed_width=2)  # last index read is 9
        z = leaf(rng.normal(size=12))
        backward(patchify(z, cfg, Tensor(rng.normal(size=(4, 2))), Tensor(np.zeros((3, 2)))).sum())
        assert np.all(z.grad[10:] == 0.0) and np.all(z.grad[:10] != 0.0)
