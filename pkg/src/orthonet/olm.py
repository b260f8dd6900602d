"""Orthogonalization-by-reparameterization for linear layers.

A layer's effective weight W is produced from free proxy parameters V by
centering the rows of V and multiplying by the symmetric inverse square root
of their covariance:

    c = row means of V,  V_C = V - c 1^T,  Sigma = V_C V_C^T = D Lambda D^T,
    W = D Lambda^{-1/2} D^T V_C.

W then has exactly orthonormal rows, and among all maps P with (P V_C)
(P V_C)^T = I this choice of P minimizes the squared distance between W and
V_C. The optimizer never sees W: gradients are propagated through the whole
transform (including the eigendecomposition) back to V, which stays
unconstrained.

Rows can be partitioned into contiguous groups that are orthogonalized
independently, which is what makes n > d layers representable and bounds the
eigenproblem size. Because centering removes one degree of freedom
(V_C 1 = 0), a group of k rows is only orthogonalizable when k <= d - 1;
larger groups raise RankError.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray

from .linalg import (
    DimensionError,
    EigPair,
    RankError,
    as_matrix,
    as_vector,
    qr_unique,
    sym_eig,
)

# Relative ridge added to the group covariance when no explicit regularizer is
# given: eps = _EPS_REG_REL * tr(Sigma) / n. The ridge enters W W^T - I with
# magnitude eps / sigma_min, so it must sit far below the 1e-8 orthonormality
# budget while still absorbing float-level negative eigenvalues of a
# numerically PSD covariance.
_EPS_REG_REL = 1e-14

# Rank test: the unridged smallest eigenvalue must exceed this fraction of the
# largest, otherwise the orthonormality postcondition is unattainable.
_RANK_REL_TOL = 1e-14

# Eigenvalue pairs closer than this fraction of the largest eigenvalue are
# treated as degenerate in the backward pass: their coupling term is zeroed.
# The forward map depends only on Sigma^{-1/2} and stays smooth there.
_GAP_REL_TOL = 1e-6


class TransformCache(NamedTuple):
    """Per-group intermediates retained for the backward pass."""

    c: NDArray[np.float64]
    sigma: NDArray[np.float64]  # regularized covariance, as decomposed
    eig: EigPair
    v_c: NDArray[np.float64]
    w: NDArray[np.float64]


@dataclass
class OlmParams:
    """Proxy parameters of one orthogonal linear layer."""

    v: NDArray[np.float64]
    bias: NDArray[np.float64]
    group_size: int
    scale: Optional[NDArray[np.float64]] = None
    eps_reg: Optional[float] = None  # None selects the relative default

    def __post_init__(self) -> None:
        self.v = as_matrix(self.v, "v")
        self.bias = as_vector(self.bias, "bias")
        n, d = self.v.shape
        if self.bias.shape[0] != n:
            raise DimensionError(f"bias length {self.bias.shape[0]} != rows {n}")
        if not (1 <= self.group_size <= d):
            raise ValueError(f"group_size must be in [1, {d}], got {self.group_size}")
        if self.scale is not None:
            self.scale = as_vector(self.scale, "scale")
            if self.scale.shape[0] != n:
                raise DimensionError(
                    f"scale length {self.scale.shape[0]} != rows {n}"
                )
        if self.eps_reg is not None and self.eps_reg < 0:
            raise ValueError("eps_reg must be >= 0")

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def d(self) -> int:
        return self.v.shape[1]


@dataclass
class OlmCache:
    """Everything the forward pass retains for the backward pass."""

    groups: list[TransformCache]
    slices: list[tuple[int, int]]
    w: NDArray[np.float64]
    h: NDArray[np.float64]


def group_slices(n: int, group_size: int) -> list[tuple[int, int]]:
    """Contiguous row blocks of size group_size, remainder rows last."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    out = []
    start = 0
    while start < n:
        stop = min(start + group_size, n)
        out.append((start, stop))
        start = stop
    return out


def center(v) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Remove the mean of each row; returns (centered matrix, row means)."""
    mat = as_matrix(v, "center input")
    if mat.shape[1] < 1:
        raise DimensionError("center needs at least one column")
    c = mat.mean(axis=1)
    return mat - c[:, None], c


def _decompose(v, eps_reg: Optional[float]) -> TransformCache:
    """Shared forward plumbing: center, covariance, ridge, eigendecompose.

    Returns a TransformCache with w not yet filled (set by the callers).
    """
    mat = as_matrix(v, "orth_transform input")
    n, d = mat.shape
    if n > d:
        raise DimensionError(
            f"cannot orthogonalize {n} rows of dimension {d}; "
            f"use groups of size at most {d - 1}"
        )
    v_c, c = center(mat)
    sigma = v_c @ v_c.T
    sigma = 0.5 * (sigma + sigma.T)
    eps = eps_reg
    if eps is None:
        eps = _EPS_REG_REL * float(np.trace(sigma)) / n
    sigma_reg = sigma + eps * np.eye(n)
    eig = sym_eig(sigma_reg)
    lam_max = float(eig.values[0])
    lam_min_unridged = float(eig.values[-1]) - eps
    if lam_max <= 0.0 or lam_min_unridged < _RANK_REL_TOL * lam_max:
        raise RankError(
            f"group of {n} rows is numerically rank-deficient after centering "
            f"(smallest/largest eigenvalue ratio below {_RANK_REL_TOL:g}); "
            f"rows of dimension {d} support at most {d - 1} per group"
        )
    return TransformCache(c=c, sigma=sigma_reg, eig=eig, v_c=v_c, w=None)


def _inv_sqrt(eig: EigPair) -> NDArray[np.float64]:
    """Symmetric inverse square root from an eigendecomposition."""
    d_mat, lam = eig.vectors, eig.values
    return (d_mat * (1.0 / np.sqrt(lam))) @ d_mat.T


def orth_transform(v, eps_reg: Optional[float] = None):
    """Map proxy rows to orthonormal rows with minimal distortion.

    Returns (w, cache) where w = Sigma^{-1/2} (v - rowmeans) has w w^T = I and
    cache holds the intermediates (c, regularized Sigma, eigendecomposition,
    centered rows) needed to backpropagate through the map.
    """
    cache = _decompose(v, eps_reg)
    w = _inv_sqrt(cache.eig) @ cache.v_c
    return w, cache._replace(w=w)


def orth_transform_var(v, eps_reg: Optional[float] = None) -> NDArray[np.float64]:
    """Variant orthogonalization using Lambda^{-1/2} D^T instead of the
    symmetric inverse square root. Also yields orthonormal rows but does not
    minimize distortion, and is not invariant to eigenvector sign and
    ordering choices."""
    w, _ = _orth_transform_var_cached(v, eps_reg)
    return w


def _orth_transform_var_cached(v, eps_reg: Optional[float] = None):
    cache = _decompose(v, eps_reg)
    d_mat, lam = cache.eig.vectors, cache.eig.values
    w = (d_mat.T @ cache.v_c) * (1.0 / np.sqrt(lam))[:, None]
    return w, cache._replace(w=w)


def distortion(w, v_c) -> float:
    """Squared Frobenius distance tr((w - v_c)(w - v_c)^T)."""
    diff = np.asarray(w, dtype=np.float64) - np.asarray(v_c, dtype=np.float64)
    return float(np.sum(diff * diff))


def min_distortion_check(v_c, w_star, trials: int, seed: int = 0) -> bool:
    """True iff no random rotation Q (drawn via QR of a Gaussian) makes
    Q w_star closer to v_c than w_star itself, across `trials` draws.

    Any row-orthonormalizing linear map of v_c equals Q w_star for some
    orthogonal Q, so sampling rotations probes the whole candidate set.
    """
    v_c = as_matrix(v_c, "v_c")
    w_star = as_matrix(w_star, "w_star")
    if v_c.shape != w_star.shape:
        raise DimensionError("v_c and w_star must have the same shape")
    n = w_star.shape[0]
    base = distortion(w_star, v_c)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        q = qr_unique(rng.normal(size=(n, n))).q
        if distortion(q @ w_star, v_c) < base - 1e-9:
            return False
    return True


# ---------------------------------------------------------------------------
# backward pass through the transform
# ---------------------------------------------------------------------------


def _eig_chain(
    d_lam_diag: NDArray[np.float64],
    d_dmat: NDArray[np.float64],
    eig: EigPair,
) -> NDArray[np.float64]:
    """Combine eigenvalue and eigenvector sensitivities into the symmetrized
    covariance sensitivity.

    Off-diagonal couplings use 1/(lambda_j - lambda_i); pairs closer than
    _GAP_REL_TOL * lambda_max are treated as degenerate and zeroed.
    """
    d_mat, lam = eig.vectors, eig.values
    n = lam.shape[0]
    gap_tol = _GAP_REL_TOL * max(float(lam[0]), 0.0)
    diff = lam[None, :] - lam[:, None]  # diff[i, j] = lambda_j - lambda_i
    with np.errstate(divide="ignore"):
        f = np.where(np.abs(diff) > gap_tol, 1.0 / diff, 0.0)
    np.fill_diagonal(f, 0.0)
    inner = f * (d_mat.T @ d_dmat)
    inner[np.arange(n), np.arange(n)] = d_lam_diag
    d_sigma = d_mat @ inner @ d_mat.T
    return 0.5 * (d_sigma + d_sigma.T)


def _assemble_dv(
    d_vc_direct: NDArray[np.float64],
    d_sigma_s: NDArray[np.float64],
    v_c: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Fold the direct centered-rows term, the covariance term and the
    row-mean term into the gradient with respect to the raw rows."""
    d = v_c.shape[1]
    total_vc = d_vc_direct + 2.0 * (d_sigma_s @ v_c)
    d_c = -total_vc.sum(axis=1)
    return total_vc + (d_c / d)[:, None]


def olm_backward_group(dL_dW, cache: TransformCache) -> NDArray[np.float64]:
    """Gradient with respect to the proxy rows of one group, given the
    gradient with respect to that group's orthonormal weights."""
    g = as_matrix(dL_dW, "dL_dW")
    w = cache.w
    if g.shape != w.shape:
        raise DimensionError(f"dL_dW shape {g.shape} != weight shape {w.shape}")
    d_mat, lam = cache.eig.vectors, cache.eig.values
    inv_sqrt_lam = 1.0 / np.sqrt(lam)
    gw_t = g @ w.T
    d_lam_diag = -0.5 * np.diagonal(d_mat.T @ gw_t @ d_mat) / lam
    sqrt_sigma = (d_mat * np.sqrt(lam)) @ d_mat.T
    d_dmat = sqrt_sigma @ w @ g.T @ (d_mat * inv_sqrt_lam) + gw_t @ d_mat
    d_sigma_s = _eig_chain(d_lam_diag, d_dmat, cache.eig)
    p = (d_mat * inv_sqrt_lam) @ d_mat.T
    return _assemble_dv(p @ g, d_sigma_s, cache.v_c)


def olm_var_backward_group(dL_dW, cache: TransformCache) -> NDArray[np.float64]:
    """Backward pass matching _orth_transform_var_cached's forward."""
    g = as_matrix(dL_dW, "dL_dW")
    w = cache.w
    if g.shape != w.shape:
        raise DimensionError(f"dL_dW shape {g.shape} != weight shape {w.shape}")
    d_mat, lam = cache.eig.vectors, cache.eig.values
    inv_sqrt_lam = 1.0 / np.sqrt(lam)
    d_lam_diag = -0.5 * np.diagonal(w @ g.T) / lam
    d_dmat = (cache.v_c @ g.T) * inv_sqrt_lam[None, :]
    d_sigma_s = _eig_chain(d_lam_diag, d_dmat, cache.eig)
    direct = (d_mat * inv_sqrt_lam) @ g
    return _assemble_dv(direct, d_sigma_s, cache.v_c)


# ---------------------------------------------------------------------------
# whole-layer forward / backward
# ---------------------------------------------------------------------------


def linear_apply(w, bias, scale, h) -> NDArray[np.float64]:
    """The layer map s = diag(scale) w h + bias 1^T (scale optional).

    Exported weights are consumed through this same routine, so inference
    with exported parameters reproduces the training-time forward bit for
    bit.
    """
    s = w @ h
    if scale is not None:
        s = scale[:, None] * s
    return s + np.asarray(bias, dtype=np.float64)[:, None]


def olm_forward(
    params: OlmParams, h, method: str = "olm"
) -> tuple[NDArray[np.float64], OlmCache]:
    """Forward pass: orthogonalize each row group of V, then apply the
    resulting weights as an affine map. method selects the transform:
    "olm" (minimal distortion) or "olm_var" (the variant)."""
    h = as_matrix(h, "h")
    n, d = params.v.shape
    if h.shape[0] != d:
        raise DimensionError(f"h has {h.shape[0]} rows, expected {d}")
    if method not in ("olm", "olm_var"):
        raise ValueError(f"unknown transform method {method!r}")
    slices = group_slices(n, params.group_size)
    groups = []
    w = np.empty((n, d))
    for start, stop in slices:
        if method == "olm":
            w_g, cache_g = orth_transform(params.v[start:stop], params.eps_reg)
        else:
            w_g, cache_g = _orth_transform_var_cached(
                params.v[start:stop], params.eps_reg
            )
        w[start:stop] = w_g
        groups.append(cache_g)
    s = linear_apply(w, params.bias, params.scale, h)
    return s, OlmCache(groups=groups, slices=slices, w=w, h=h)


def olm_backward(
    dL_dS, cache: OlmCache, params: OlmParams, method: str = "olm"
) -> tuple[
    NDArray[np.float64],
    NDArray[np.float64],
    Optional[NDArray[np.float64]],
    NDArray[np.float64],
]:
    """Backward pass matching olm_forward; returns (dV, db, dg or None, dH)."""
    g_s = as_matrix(dL_dS, "dL_dS")
    n, d = params.v.shape
    if g_s.shape != (n, cache.h.shape[1]):
        raise DimensionError(
            f"dL_dS shape {g_s.shape} != ({n}, {cache.h.shape[1]})"
        )
    backward_group = (
        olm_backward_group if method == "olm" else olm_var_backward_group
    )
    db = g_s.sum(axis=1)
    if params.scale is not None:
        g_eff = params.scale[:, None] * g_s
        dg = (g_s * (cache.w @ cache.h)).sum(axis=1)
    else:
        g_eff = g_s
        dg = None
    d_w = g_eff @ cache.h.T
    d_h = cache.w.T @ g_eff
    d_v = np.empty_like(params.v)
    for (start, stop), cache_g in zip(cache.slices, cache.groups):
        d_v[start:stop] = backward_group(d_w[start:stop], cache_g)
    return d_v, db, dg, d_h


def export_weights(
    params: OlmParams, method: str = "olm"
) -> tuple[NDArray[np.float64], NDArray[np.float64], Optional[NDArray[np.float64]]]:
    """Materialize the effective weights (w, bias, scale) of a layer.

    A plain affine layer built from these values reproduces olm_forward
    outputs exactly, because the forward derives w by the identical
    computation before applying the identical affine map.
    """
    n, d = params.v.shape
    w = np.empty((n, d))
    for start, stop in group_slices(n, params.group_size):
        if method == "olm":
            w_g, _ = orth_transform(params.v[start:stop], params.eps_reg)
        else:
            w_g, _ = _orth_transform_var_cached(params.v[start:stop], params.eps_reg)
        w[start:stop] = w_g
    bias = params.bias.copy()
    scale = None if params.scale is None else params.scale.copy()
    return w, bias, scale


# ---------------------------------------------------------------------------
# convolution-weight reshaping (pure layout transform)
# ---------------------------------------------------------------------------


def unroll_conv_weights(wc) -> NDArray[np.float64]:
    """Flatten a bank of n filters of shape (d, F_h, F_w) into an
    n x (d F_h F_w) matrix, row k being filter k in (channel, height, width)
    order."""
    arr = np.ascontiguousarray(wc, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(f"expected a 4-axis array, got ndim={arr.ndim}")
    n = arr.shape[0]
    return arr.reshape(n, -1)


def roll_conv_weights(w, d: int, f_h: int, f_w: int) -> NDArray[np.float64]:
    """Inverse of unroll_conv_weights."""
    mat = as_matrix(w, "w")
    n, flat = mat.shape
    if flat != d * f_h * f_w:
        raise DimensionError(
            f"cannot reshape {flat} columns into ({d}, {f_h}, {f_w})"
        )
    return mat.reshape(n, d, f_h, f_w)


def init_olm_params(
    n: int,
    d: int,
    group_size: int,
    rng: np.random.Generator,
    with_scale: bool = False,
    eps_reg: Optional[float] = None,
) -> OlmParams:
    """Fresh proxy parameters: V i.i.d. Gaussian with std 1/sqrt(d), zero
    bias, unit scale when enabled. Any full-rank draw produces orthonormal
    weights after the first forward, so only rank matters here."""
    v = rng.normal(size=(n, d)) / np.sqrt(d)
    scale = np.ones(n) if with_scale else None
    return OlmParams(
        v=v, bias=np.zeros(n), group_size=group_size, scale=scale, eps_reg=eps_reg
    )
