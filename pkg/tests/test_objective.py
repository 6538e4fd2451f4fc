"""Alignment loss, kernel alignment, and uniformity metrics."""

import numpy as np
import pytest

from stldistill import objective as ob


def unit_rows(rng, b, d):
    e = rng.normal(size=(b, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


class TestLoss:
    def test_perfect_fit_zero(self):
        rng = np.random.default_rng(0)
        e = unit_rows(rng, 4, 8)
        k = e @ e.T
        value, grad = ob.loss(e, k)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_hand_computed_two_by_two(self):
        # rows on the unit circle with dot 0.9; targets [[1,.5],[.5,1]]
        e = np.array([[1.0, 0.0], [0.9, np.sqrt(1 - 0.81)]])
        k = np.array([[1.0, 0.5], [0.5, 1.0]])
        value, _ = ob.loss(e, k, ob.LossConfig(gamma=2.0, clamp=5.0))
        # residuals {0, .4, .4, 0}; mean |r|^2 = .08; w = {0,2,2,0};
        # loss = (1/4)(2*.16 + 2*.16) = .16
        assert value == pytest.approx(0.16, abs=1e-12)

    def test_gamma_zero_is_plain_mse(self):
        rng = np.random.default_rng(1)
        e = unit_rows(rng, 5, 6)
        k = np.clip(np.abs(rng.normal(size=(5, 5))), 0, 1)
        k = (k + k.T) / 2
        np.fill_diagonal(k, 1.0)
        value, _ = ob.loss(e, k, ob.LossConfig(gamma=0.0))
        s = e @ e.T
        assert value == pytest.approx(float(((k - s) ** 2).mean()), rel=1e-12)

    def test_clamp_caps_weights(self):
        # one huge residual in an otherwise near-perfect batch gets clamped
        e = np.eye(3)
        k = e @ e.T
        k = k.copy()
        k[0, 1] = k[1, 0] = 1.0  # S has 0 there; residual 1 dominates
        cfg = ob.LossConfig(gamma=4.0, clamp=2.0)
        value, _ = ob.loss(e, k, cfg)
        # unclamped weight would be 9/2; clamp=2 caps both symmetric pairs
        assert value == pytest.approx((2.0 * 1.0 * 2) / 9, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        e = unit_rows(rng, 4, 8)
        k = np.clip(np.abs(rng.normal(size=(4, 4))), 0, 1)
        k = (k + k.T) / 2
        np.fill_diagonal(k, 1.0)
        cfg = ob.LossConfig(gamma=2.0, clamp=5.0)
        _, grad = ob.loss(e, k, cfg)

        # w is a stop-gradient factor: freeze it at the base point
        s0 = e @ e.T
        powered = np.abs(k - s0) ** cfg.gamma
        w0 = np.minimum(powered / powered.mean(), cfg.clamp)

        def frozen_loss(em):
            s = em @ em.T
            return float((w0 * (k - s) ** 2).mean())

        h = 1e-6
        fd = np.zeros_like(e)
        for i in range(e.shape[0]):
            for j in range(e.shape[1]):
                ep = e.copy()
                ep[i, j] += h
                em = e.copy()
                em[i, j] -= h
                fd[i, j] = (frozen_loss(ep) - frozen_loss(em)) / (2 * h)
        rel = np.abs(fd - grad) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-3

    def test_symmetric_under_row_permutation(self):
        rng = np.random.default_rng(3)
        e = unit_rows(rng, 6, 4)
        k = np.clip(np.abs(rng.normal(size=(6, 6))), 0, 1)
        k = (k + k.T) / 2
        np.fill_diagonal(k, 1.0)
        perm = rng.permutation(6)
        v1, _ = ob.loss(e, k)
        v2, _ = ob.loss(e[perm], k[np.ix_(perm, perm)])
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_weights_mean_one_before_clamp(self):
        rng = np.random.default_rng(4)
        e = unit_rows(rng, 5, 4)
        k = np.clip(np.abs(rng.normal(size=(5, 5))), 0, 1)
        k = (k + k.T) / 2
        np.fill_diagonal(k, 1.0)
        s = e @ e.T
        powered = np.abs(k - s) ** 2.0
        w = powered / powered.mean()
        assert w.mean() == pytest.approx(1.0, rel=1e-12)

    def test_shape_and_finiteness_errors(self):
        with pytest.raises(ValueError, match="shape"):
            ob.loss(np.ones((2, 3)), np.ones((3, 3)))
        bad = np.ones((2, 2))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            ob.loss(np.ones((2, 3)), bad)


class TestKernelAlignment:
    def test_identity(self):
        k = np.array([[1.0, 0.4], [0.4, 1.0]])
        assert ob.kernel_alignment(k, k) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        k = np.abs(rng.normal(size=(4, 4)))
        assert ob.kernel_alignment(k, 3.7 * k) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_matrices(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert ob.kernel_alignment(a, b) == 0.0

    def test_zero_matrix_error(self):
        with pytest.raises(ValueError):
            ob.kernel_alignment(np.zeros((2, 2)), np.ones((2, 2)))


class TestUniformity:
    def test_identical_rows_exactly_zero(self):
        e = np.tile(np.array([[0.6, 0.8]]), (5, 1))
        assert ob.uniformity(e) == 0.0

    def test_antipodal_pair(self):
        e = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert ob.uniformity(e) == pytest.approx(-8.0, abs=1e-12)

    def test_large_uniform_batch_above_asymptote(self):
        rng = np.random.default_rng(6)
        e = unit_rows(rng, 2000, 64)
        u = ob.uniformity(e)
        assert -4.0 < u < -3.5

    def test_chunking_consistent(self):
        rng = np.random.default_rng(7)
        e = unit_rows(rng, 300, 16)
        assert ob.uniformity(e, chunk_size=7) == pytest.approx(
            ob.uniformity(e, chunk_size=300), rel=1e-12
        )

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            ob.uniformity(np.ones((1, 4)))
