"""Dense linear-algebra kernels used by every other module.

From-scratch implementations of the three nontrivial operations this project
needs (symmetric eigendecomposition, uniqueness-fixed QR, small dense solves),
plus shape-checked wrappers for basic matrix arithmetic. Everything operates
on C-contiguous float64 arrays and is deterministic: identical inputs produce
bit-identical outputs (fixed sweep order, fixed sign conventions, fixed
pivoting rule).

The heavy kernels are JIT-compiled with numba when it is importable and fall
back to the identical pure-Python code path otherwise.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


class LinalgError(Exception):
    """Base class for errors raised by the numerical kernels."""


class DimensionError(LinalgError):
    """Operand shapes do not conform."""


class NonFiniteError(LinalgError, ValueError):
    """An input contains NaN or Inf."""


class RankError(LinalgError):
    """An input is (numerically) rank-deficient where full rank is required."""


class SingularityError(LinalgError):
    """A linear solve hit a pivot too small to trust."""


class EigPair(NamedTuple):
    """Eigenvalues sorted in non-increasing order and the matching eigenvector
    matrix (eigenvectors are the columns)."""

    values: NDArray[np.float64]
    vectors: NDArray[np.float64]


class QrPair(NamedTuple):
    """Q with orthonormal columns and upper-triangular R with positive diagonal."""

    q: NDArray[np.float64]
    r: NDArray[np.float64]


def as_matrix(a, name: str = "matrix") -> NDArray[np.float64]:
    """Coerce to a C-contiguous float64 2-D array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name: str = "vector") -> NDArray[np.float64]:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# symmetric eigendecomposition: cyclic Jacobi rotations
# ---------------------------------------------------------------------------

# Convergence: off-diagonal Frobenius norm below 1e-12 * ||S||_F, at most 100
# full sweeps. Plenty for the small matrices this project sees (group size at
# most a few hundred).
_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 100


@njit(cache=True)
def _jacobi_kernel(a, v, off_tol, max_sweeps):
    n = a.shape[0]
    for _sweep in range(max_sweeps):
        off2 = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off2 += 2.0 * a[i, j] * a[i, j]
        if np.sqrt(off2) <= off_tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # a <- J^T a J with J the rotation in the (p, q) plane
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                # the rotation annihilates the (p, q) entry in exact
                # arithmetic; pin it to keep the iterate exactly symmetric
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq


def sym_eig(s) -> EigPair:
    """Eigendecomposition of a symmetric matrix.

    Returns eigenvalues sorted in non-increasing order and eigenvectors as
    columns, each flipped so its largest-magnitude entry (lowest index on
    ties) is non-negative. Raises DimensionError for non-square input and
    NonFiniteError for NaN/Inf entries; inputs asymmetric beyond tolerance
    are rejected, mild asymmetry is symmetrized away before decomposing.
    """
    a = as_matrix(s, "sym_eig input")
    n, m = a.shape
    if n != m:
        raise DimensionError(f"sym_eig needs a square matrix, got {n}x{m}")
    fro = float(np.sqrt(np.sum(a * a)))
    asym = float(np.sqrt(np.sum((a - a.T) ** 2)))
    if asym > 1e-10 * (1.0 + fro):
        raise ValueError(
            f"sym_eig input is not symmetric: ||A - A^T||_F = {asym:g}"
        )
    work = np.ascontiguousarray(0.5 * (a + a.T))
    vecs = np.eye(n)
    _jacobi_kernel(work, vecs, _JACOBI_TOL * fro, _JACOBI_MAX_SWEEPS)
    vals = np.diagonal(work).copy()
    order = np.argsort(-vals, kind="stable")
    vals = np.ascontiguousarray(vals[order])
    vecs = np.ascontiguousarray(vecs[:, order])
    # sign convention: largest-magnitude component of each eigenvector is
    # non-negative, ties broken by lowest index (argmax picks the first max)
    for j in range(n):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return EigPair(vals, vecs)


# ---------------------------------------------------------------------------
# QR decomposition: Householder reflections, unique via positive diag(R)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _householder_kernel(a, rank_tol):
    n, d = a.shape
    r = a.copy()
    vs = np.zeros((n, d))
    betas = np.zeros(d)
    for k in range(d):
        normx2 = 0.0
        for i in range(k, n):
            normx2 += r[i, k] * r[i, k]
        normx = np.sqrt(normx2)
        if normx <= rank_tol:
            return r, vs, betas, k
        s = 1.0 if r[k, k] >= 0.0 else -1.0
        # v = x + sign(x_0) * ||x|| * e_0 avoids cancellation in v_0
        v0 = r[k, k] + s * normx
        vs[k, k] = v0
        vnorm2 = v0 * v0
        for i in range(k + 1, n):
            vs[i, k] = r[i, k]
            vnorm2 += r[i, k] * r[i, k]
        beta = 2.0 / vnorm2
        betas[k] = beta
        for j in range(k, d):
            w = 0.0
            for i in range(k, n):
                w += vs[i, k] * r[i, j]
            w *= beta
            for i in range(k, n):
                r[i, j] -= w * vs[i, k]
    return r, vs, betas, -1


@njit(cache=True)
def _householder_accumulate_q(vs, betas, n, d):
    q = np.zeros((n, d))
    for j in range(d):
        q[j, j] = 1.0
    for k in range(d - 1, -1, -1):
        beta = betas[k]
        for j in range(d):
            w = 0.0
            for i in range(k, n):
                w += vs[i, k] * q[i, j]
            w *= beta
            for i in range(k, n):
                q[i, j] -= w * vs[i, k]
    return q


def qr_unique(a) -> QrPair:
    """Reduced QR decomposition with the sign ambiguity removed.

    The R factor has a strictly positive diagonal and exact zeros below it,
    which makes the factorization unique for full-column-rank input. Raises
    RankError (naming the offending column) when the smallest R diagonal
    would fall at or below 1e-12 * ||a||_F.
    """
    mat = as_matrix(a, "qr_unique input")
    n, d = mat.shape
    if n < d:
        raise DimensionError(f"qr_unique needs n >= d, got {n}x{d}")
    fro = float(np.sqrt(np.sum(mat * mat)))
    r, vs, betas, fail = _householder_kernel(mat, 1e-12 * fro)
    if fail >= 0:
        raise RankError(
            f"qr_unique: column {fail} is linearly dependent on earlier "
            f"columns (remaining norm <= 1e-12 * ||a||)"
        )
    q = _householder_accumulate_q(vs, betas, n, d)
    r = np.ascontiguousarray(r[:d, :])
    # force exact zeros below the diagonal and a positive diagonal
    for i in range(d):
        r[i, :i] = 0.0
        if r[i, i] < 0.0:
            r[i, :] = -r[i, :]
            q[:, i] = -q[:, i]
    return QrPair(np.ascontiguousarray(q), r)


# ---------------------------------------------------------------------------
# small dense solve: Gaussian elimination with partial pivoting
# ---------------------------------------------------------------------------


@njit(cache=True)
def _gauss_kernel(a, b, piv_tol):
    n = a.shape[0]
    m = b.shape[1]
    for k in range(n):
        piv = k
        pmax = abs(a[k, k])
        for i in range(k + 1, n):
            mag = abs(a[i, k])
            if mag > pmax:
                pmax = mag
                piv = i
        if pmax <= piv_tol:
            return k
        if piv != k:
            for j in range(n):
                tmp = a[k, j]
                a[k, j] = a[piv, j]
                a[piv, j] = tmp
            for j in range(m):
                tmp = b[k, j]
                b[k, j] = b[piv, j]
                b[piv, j] = tmp
        for i in range(k + 1, n):
            f = a[i, k] / a[k, k]
            a[i, k] = 0.0
            if f != 0.0:
                for j in range(k + 1, n):
                    a[i, j] -= f * a[k, j]
                for j in range(m):
                    b[i, j] -= f * b[k, j]
    for k in range(n - 1, -1, -1):
        for j in range(m):
            acc = b[k, j]
            for i in range(k + 1, n):
                acc -= a[k, i] * b[i, j]
            b[k, j] = acc / a[k, k]
    return -1


def solve_small(a, b) -> NDArray[np.float64]:
    """Solve a x = b for square, well-conditioned a.

    b may be a vector or a matrix of stacked right-hand-side columns. Raises
    SingularityError when a pivot falls at or below 1e-12 * ||a||_F.
    """
    amat = as_matrix(a, "solve_small a")
    n, m = amat.shape
    if n != m:
        raise DimensionError(f"solve_small needs square a, got {n}x{m}")
    barr = np.ascontiguousarray(b, dtype=np.float64)
    if not np.all(np.isfinite(barr)):
        raise NonFiniteError("solve_small b contains non-finite entries")
    vector_rhs = barr.ndim == 1
    if vector_rhs:
        barr = barr.reshape(-1, 1)
    if barr.ndim != 2 or barr.shape[0] != n:
        raise DimensionError(
            f"solve_small b has shape {np.shape(b)}, expected leading dim {n}"
        )
    fro = float(np.sqrt(np.sum(amat * amat)))
    awork = amat.copy()
    x = barr.copy()
    fail = _gauss_kernel(awork, x, 1e-12 * fro)
    if fail >= 0:
        raise SingularityError(
            f"solve_small: pivot {fail} at or below 1e-12 * ||a||"
        )
    return x[:, 0] if vector_rhs else x


# ---------------------------------------------------------------------------
# shape-checked arithmetic wrappers
# ---------------------------------------------------------------------------


def matmul(a, b) -> NDArray[np.float64]:
    amat = np.asarray(a, dtype=np.float64)
    bmat = np.asarray(b, dtype=np.float64)
    if amat.shape[-1] != bmat.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {amat.shape} vs {bmat.shape}"
        )
    return amat @ bmat


def transpose(a) -> NDArray[np.float64]:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)


def add(a, b) -> NDArray[np.float64]:
    amat = np.asarray(a, dtype=np.float64)
    bmat = np.asarray(b, dtype=np.float64)
    if amat.shape != bmat.shape:
        raise DimensionError(f"add: shapes differ, {amat.shape} vs {bmat.shape}")
    return amat + bmat


def scale(a, alpha: float) -> NDArray[np.float64]:
    return float(alpha) * np.asarray(a, dtype=np.float64)


def trace(a) -> float:
    amat = np.asarray(a, dtype=np.float64)
    if amat.ndim != 2 or amat.shape[0] != amat.shape[1]:
        raise DimensionError(f"trace needs a square matrix, got {amat.shape}")
    return float(np.trace(amat))
