"""Tests for the manifold update rules and Riemannian gradients."""

import numpy as np
import pytest

from orthonet import stiefel
from orthonet.linalg import qr_unique
from orthonet.stiefel import (
    COLUMN,
    ROW,
    ManifoldError,
    StiefelState,
    cayley_step,
    qr_projection_step,
    qr_retraction_step,
    riem_grad_canonical,
    riem_grad_euclidean,
    step_row_weights,
)


def random_state(rng, n, d):
    return StiefelState(qr_unique(rng.normal(size=(n, d))).q)


class TestStiefelState:
    def test_column_convention_accepts_orthonormal(self):
        st = StiefelState(np.eye(3)[:, :2])
        assert st.convention == COLUMN

    def test_row_convention(self):
        st = StiefelState(np.eye(3)[:2, :], convention=ROW)
        assert st.w.shape == (2, 3)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ManifoldError):
            StiefelState(np.ones((3, 2)))

    def test_rejects_wrong_shape_for_convention(self):
        from orthonet.linalg import DimensionError

        rng = np.random.default_rng(0)
        q = qr_unique(rng.normal(size=(4, 2))).q
        with pytest.raises(DimensionError):
            StiefelState(q, convention=ROW)  # row convention needs n <= d


class TestRiemannianGradients:
    def test_gradient_equal_to_point_vanishes(self):
        rng = np.random.default_rng(1)
        st = random_state(rng, 5, 3)
        assert np.allclose(riem_grad_euclidean(st, st.w), 0.0, atol=1e-12)
        assert np.allclose(riem_grad_canonical(st, st.w), 0.0, atol=1e-12)

    def test_zero_gradient(self):
        rng = np.random.default_rng(2)
        st = random_state(rng, 4, 2)
        z = np.zeros((4, 2))
        assert np.array_equal(riem_grad_euclidean(st, z), z)
        assert np.array_equal(riem_grad_canonical(st, z), z)

    def test_tangency(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(1, n + 1))
            st = random_state(rng, n, d)
            g = rng.normal(size=(n, d))
            for riem in (riem_grad_euclidean, riem_grad_canonical):
                z = riem(st, g)
                assert np.abs(st.w.T @ z + z.T @ st.w).max() < 1e-9

    def test_square_case_canonical_is_half_euclidean(self):
        rng = np.random.default_rng(4)
        st = random_state(rng, 4, 4)
        g = rng.normal(size=(4, 4))
        assert np.allclose(
            riem_grad_canonical(st, g), 0.5 * riem_grad_euclidean(st, g), atol=1e-12
        )


class TestSteps:
    def test_qr_retraction_zero_lr_is_identity(self):
        rng = np.random.default_rng(5)
        st = random_state(rng, 6, 3)
        out = qr_retraction_step(st, rng.normal(size=(6, 3)), 0.0)
        assert np.allclose(out.w, st.w, atol=1e-12)

    def test_qr_retraction_zero_direction(self):
        rng = np.random.default_rng(6)
        st = random_state(rng, 5, 2)
        out = qr_retraction_step(st, np.zeros((5, 2)), 0.3)
        assert np.allclose(out.w, st.w, atol=1e-12)

    def test_steps_stay_on_manifold(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(1, n + 1))
            st = random_state(rng, n, d)
            g = rng.normal(size=(n, d))
            lr = float(rng.uniform(1e-4, 1.0))
            outs = [
                qr_retraction_step(st, riem_grad_euclidean(st, g), lr),
                qr_retraction_step(st, riem_grad_canonical(st, g), lr),
                cayley_step(st, g, lr),
                qr_projection_step(st, g, lr),
            ]
            for out in outs:
                assert np.linalg.norm(out.w.T @ out.w - np.eye(d)) < 1e-8

    def test_cayley_zero_lr_bit_exact(self):
        rng = np.random.default_rng(8)
        st = random_state(rng, 5, 3)
        out = cayley_step(st, rng.normal(size=(5, 3)), 0.0)
        assert np.array_equal(out.w, st.w)

    def test_cayley_gradient_at_point_is_identity(self):
        rng = np.random.default_rng(9)
        st = random_state(rng, 5, 3)
        out = cayley_step(st, st.w, 0.1)
        assert np.allclose(out.w, st.w, atol=1e-12)

    def test_cayley_generator_is_skew(self):
        rng = np.random.default_rng(10)
        st = random_state(rng, 6, 4)
        g = rng.normal(size=(6, 4))
        a = g.T @ st.w - st.w.T @ g
        assert np.abs(a + a.T).max() < 1e-14 * max(1.0, np.abs(a).max())

    def test_projection_zero_lr_returns_input_unchanged(self):
        rng = np.random.default_rng(11)
        st = random_state(rng, 4, 2)
        out = qr_projection_step(st, rng.normal(size=(4, 2)), 0.0)
        assert np.array_equal(out.w, st.w)

    def test_retraction_first_order_consistency(self):
        # residual against the unretracted step shrinks quadratically in lr,
        # so its square shrinks by 16x per lr halving
        rng = np.random.default_rng(12)
        st = random_state(rng, 6, 3)
        z = riem_grad_euclidean(st, rng.normal(size=(6, 3)))
        residuals = []
        for lr in (0.1, 0.05, 0.025):
            out = qr_retraction_step(st, z, lr)
            residuals.append(np.linalg.norm(out.w - (st.w - lr * z)) ** 2)
        assert residuals[0] / residuals[1] == pytest.approx(16.0, rel=0.2)
        assert residuals[1] / residuals[2] == pytest.approx(16.0, rel=0.2)

    def test_descent_direction(self):
        # a small step along the negative Riemannian gradient reduces a
        # quadratic objective
        rng = np.random.default_rng(13)
        st = random_state(rng, 6, 3)
        target = rng.normal(size=(6, 3))

        def f(w):
            return 0.5 * np.linalg.norm(w - target) ** 2

        g = st.w - target
        lr = 1e-3
        assert f(qr_retraction_step(st, riem_grad_euclidean(st, g), lr).w) < f(st.w)
        assert f(qr_retraction_step(st, riem_grad_canonical(st, g), lr).w) < f(st.w)
        assert f(cayley_step(st, g, lr).w) < f(st.w)


class TestRowAdapter:
    def test_row_weights_stay_orthonormal(self):
        rng = np.random.default_rng(14)
        for method in ("ei_qr", "ci_qr", "cayt", "qr_proj"):
            w = qr_unique(rng.normal(size=(7, 3))).q.T  # 3x7 row-orthonormal
            g = rng.normal(size=(3, 7))
            out = step_row_weights(w, g, 0.1, method)
            assert out.shape == (3, 7)
            assert np.linalg.norm(out @ out.T - np.eye(3)) < 1e-8

    def test_unknown_method_rejected(self):
        rng = np.random.default_rng(15)
        w = qr_unique(rng.normal(size=(5, 2))).q.T
        with pytest.raises(ValueError):
            step_row_weights(w, np.zeros((2, 5)), 0.1, "nonsense")

    def test_adapter_matches_column_step(self):
        rng = np.random.default_rng(16)
        w_col = qr_unique(rng.normal(size=(6, 2))).q
        g_col = rng.normal(size=(6, 2))
        direct = qr_retraction_step(
            StiefelState(w_col), riem_grad_euclidean(StiefelState(w_col), g_col), 0.2
        )
        via_rows = step_row_weights(w_col.T.copy(), g_col.T.copy(), 0.2, "ei_qr")
        assert np.allclose(via_rows, direct.w.T, atol=1e-12)
