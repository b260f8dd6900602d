"""Gradient steps constrained to matrices with orthonormal columns or rows.

The update rules (two Riemannian gradients, QR retraction, Cayley transform,
naive QR projection) are written in the column-orthonormal convention
(W^T W = I, n >= d). Network layers store row-orthonormal weights
(W W^T = I, n <= d); `step_row_weights` is the transpose adapter that
converts before and after each update so no caller ever mixes conventions
silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .linalg import (
    DimensionError,
    LinalgError,
    as_matrix,
    qr_unique,
    solve_small,
)

ROW = "row_orthonormal"
COLUMN = "column_orthonormal"

_ORTHO_TOL = 1e-8


class ManifoldError(LinalgError):
    """A state failed its orthonormality invariant."""


@dataclass(frozen=True)
class StiefelState:
    """A point with orthonormal rows or columns, tagged with its convention."""

    w: NDArray[np.float64]
    convention: str = COLUMN

    def __post_init__(self) -> None:
        w = as_matrix(self.w, "stiefel point")
        object.__setattr__(self, "w", w)
        n, d = w.shape
        if self.convention == COLUMN:
            if n < d:
                raise DimensionError(
                    f"column-orthonormal state needs n >= d, got {n}x{d}"
                )
            gram = w.T @ w
        elif self.convention == ROW:
            if n > d:
                raise DimensionError(
                    f"row-orthonormal state needs n <= d, got {n}x{d}"
                )
            gram = w @ w.T
        else:
            raise ValueError(f"unknown convention {self.convention!r}")
        err = float(np.sqrt(np.sum((gram - np.eye(gram.shape[0])) ** 2)))
        if err > _ORTHO_TOL:
            raise ManifoldError(
                f"state violates {self.convention} orthonormality: "
                f"||gram - I||_F = {err:.3e}"
            )


def _require_column(state: StiefelState, g) -> NDArray[np.float64]:
    if state.convention != COLUMN:
        raise DimensionError(
            "update rules operate on column-orthonormal states; "
            "use step_row_weights for row-orthonormal layer weights"
        )
    grad = as_matrix(g, "gradient")
    if grad.shape != state.w.shape:
        raise DimensionError(
            f"gradient shape {grad.shape} != state shape {state.w.shape}"
        )
    return grad


def riem_grad_euclidean(state: StiefelState, g) -> NDArray[np.float64]:
    """Tangent-space gradient under the Euclidean inner product:
    G - W G^T W."""
    grad = _require_column(state, g)
    w = state.w
    return grad - w @ grad.T @ w


def riem_grad_canonical(state: StiefelState, g) -> NDArray[np.float64]:
    """Tangent-space gradient under the canonical inner product:
    G - (W W^T G + W G^T W) / 2."""
    grad = _require_column(state, g)
    w = state.w
    return grad - 0.5 * (w @ (w.T @ grad) + w @ grad.T @ w)


def qr_retraction_step(state: StiefelState, direction, lr: float) -> StiefelState:
    """Move against `direction` and retract onto the manifold by taking the
    Q factor of the unique QR decomposition."""
    z = _require_column(state, direction)
    q = qr_unique(state.w - lr * z).q
    return StiefelState(q, COLUMN)


def cayley_step(state: StiefelState, g, lr: float) -> StiefelState:
    """Cayley-transform update generated by the skew matrix
    A = G^T W - W^T G (square of the smaller dimension).

    Applied in the transposed domain, W_next^T = (I + (lr/2) A)^{-1}
    (I - (lr/2) A) W^T, which conforms dimensionally and preserves
    orthonormality exactly for skew A. With lr = 0 the solve is against the
    identity and the result is the input bit for bit.
    """
    grad = _require_column(state, g)
    w = state.w
    a = grad.T @ w - w.T @ grad  # d x d, skew-symmetric by construction
    d = a.shape[0]
    half = 0.5 * lr
    m_plus = np.eye(d) + half * a
    m_minus = np.eye(d) - half * a
    w_next_t = solve_small(m_plus, m_minus @ w.T)
    return StiefelState(np.ascontiguousarray(w_next_t.T), COLUMN)


def qr_projection_step(state: StiefelState, g, lr: float) -> StiefelState:
    """Plain gradient step followed by QR projection back onto the manifold.

    Unlike qr_retraction_step this consumes the raw gradient, not a tangent
    vector. lr = 0 returns the input state unchanged.
    """
    grad = _require_column(state, g)
    if lr == 0.0:
        return state
    q = qr_unique(state.w - lr * grad).q
    return StiefelState(q, COLUMN)


_ROW_METHODS = ("ei_qr", "ci_qr", "cayt", "qr_proj")


def step_row_weights(w_row, g_row, lr: float, method: str) -> NDArray[np.float64]:
    """Apply one constrained update to row-orthonormal weights.

    Transposes to the column convention, dispatches on `method` (ei_qr,
    ci_qr, cayt, qr_proj), and transposes back.
    """
    if method not in _ROW_METHODS:
        raise ValueError(f"unknown manifold method {method!r}")
    w = as_matrix(w_row, "w_row")
    g = as_matrix(g_row, "g_row")
    if g.shape != w.shape:
        raise DimensionError(f"gradient shape {g.shape} != weight shape {w.shape}")
    state = StiefelState(np.ascontiguousarray(w.T), COLUMN)
    g_col = np.ascontiguousarray(g.T)
    if method == "ei_qr":
        z = riem_grad_euclidean(state, g_col)
        new = qr_retraction_step(state, z, lr)
    elif method == "ci_qr":
        z = riem_grad_canonical(state, g_col)
        new = qr_retraction_step(state, z, lr)
    elif method == "cayt":
        new = cayley_step(state, g_col, lr)
    else:
        new = qr_projection_step(state, g_col, lr)
    return np.ascontiguousarray(new.w.T)
