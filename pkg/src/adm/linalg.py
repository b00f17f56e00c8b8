"""Dense symmetric linear algebra for covariance-sized matrices.

Every routine accepts a single matrix of shape ``(c, c)`` or a stack of
matrices of shape ``(..., c, c)``; leading dimensions broadcast the way
``numpy.matmul`` broadcasts them. The factorizations are written out here
(column Cholesky, triangular substitution, cyclic Jacobi) rather than
delegated to LAPACK so that the failure modes and tolerances are fixed.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonFinite, NotPositiveDefinite, NotPSD

__all__ = [
    "cholesky",
    "log_det",
    "spd_solve",
    "trace_solve",
    "eigh",
    "eigvalsh",
    "sqrtm_psd",
    "PIVOT_RTOL",
    "SYMMETRY_ATOL",
    "MAX_SWEEPS",
]

PIVOT_RTOL = 1e-12
SYMMETRY_ATOL = 1e-9
MAX_SWEEPS = 100
JACOBI_RTOL = 1e-12
PSD_CLAMP_RTOL = 1e-10


def _as_square(a, name: str = "a") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return a


def _check_symmetric(a: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - np.swapaxes(a, -1, -2))) > SYMMETRY_ATOL * scale:
        raise DimensionMismatch("matrix is not symmetric")


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises
    ------
    NotPositiveDefinite
        If a pivot falls to ``dim * 1e-12 * max(diag(a))`` or below. The
        caller is expected to regularize and retry; nothing is repaired here.
    """
    a = _as_square(a)
    _check_symmetric(a)
    c = a.shape[-1]
    floor = c * PIVOT_RTOL * np.max(np.diagonal(a, axis1=-2, axis2=-1), axis=-1)
    L = np.zeros_like(a)
    for j in range(c):
        row = L[..., j, :j]
        pivot = a[..., j, j] - np.sum(row * row, axis=-1)
        bad = ~(pivot > floor)
        if np.any(bad):
            raise NotPositiveDefinite(
                f"pivot {np.min(pivot):.3e} at column {j} is not above {np.max(floor):.3e}"
            )
        d = np.sqrt(pivot)
        L[..., j, j] = d
        if j + 1 < c:
            below = a[..., j + 1 :, j] - np.einsum("...ik,...k->...i", L[..., j + 1 :, :j], row)
            L[..., j + 1 :, j] = below / d[..., None]
    return L


def log_det(l) -> np.ndarray | float:
    """Log-determinant of ``l @ l.T`` from its Cholesky factor."""
    diag = np.diagonal(np.asarray(l, dtype=np.float64), axis1=-2, axis2=-1)
    out = 2.0 * np.sum(np.log(diag), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _forward(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    c = l.shape[-1]
    shape = np.broadcast_shapes(l.shape[:-2], b.shape[:-2]) + b.shape[-2:]
    y = np.zeros(shape)
    for i in range(c):
        acc = b[..., i, :] - np.einsum("...k,...km->...m", l[..., i, :i], y[..., :i, :])
        y[..., i, :] = acc / l[..., i, i, None]
    return y


def _backward(l: np.ndarray, y: np.ndarray) -> np.ndarray:
    # solves L^T x = y
    c = l.shape[-1]
    x = np.zeros(np.broadcast_shapes(l.shape[:-2], y.shape[:-2]) + y.shape[-2:])
    for i in range(c - 1, -1, -1):
        acc = y[..., i, :] - np.einsum("...k,...km->...m", l[..., i + 1 :, i], x[..., i + 1 :, :])
        x[..., i, :] = acc / l[..., i, i, None]
    return x


def spd_solve(l, b) -> np.ndarray:
    """Solve ``(l @ l.T) x = b`` by forward then backward substitution.

    ``b`` is a vector (stack) when ``b.ndim == l.ndim - 1`` and a matrix
    (stack) when ``b.ndim == l.ndim``.
    """
    l = np.asarray(l, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = l.shape[-1]
    vector = b.ndim == l.ndim - 1
    if not vector and b.ndim != l.ndim:
        raise DimensionMismatch(f"cannot solve factor of shape {l.shape} against {b.shape}")
    rows = b.shape[-1] if vector else b.shape[-2]
    if rows != c:
        raise DimensionMismatch(f"right-hand side has {rows} rows, factor has dimension {c}")
    rhs = b[..., None] if vector else b
    x = _backward(l, _forward(l, rhs))
    return x[..., 0] if vector else x


def trace_solve(l, b) -> np.ndarray | float:
    """``trace((l @ l.T)^{-1} b)``."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != np.ndim(l) or b.shape[-1] != b.shape[-2]:
        raise DimensionMismatch(f"expected square matrix stack, got shape {b.shape}")
    out = np.trace(spd_solve(l, b), axis1=-2, axis2=-1)
    return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=None)
def _round_robin(c: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint (p, q) pairings covering every index pair once per sweep."""
    m = c + (c % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < c and q < c]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def eigh(a) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round touch disjoint rows and can be applied
    together. Iterates until the off-diagonal Frobenius mass is below
    ``1e-12 * ||a||_F``.

    Returns
    -------
    w : ndarray, shape (..., c)
        Eigenvalues in ascending order.
    v : ndarray, shape (..., c, c)
        Orthonormal eigenvectors as columns, ``a = v @ diag(w) @ v.T``.
    """
    return _jacobi(a, vectors=True)


def eigvalsh(a) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix (Jacobi, no vectors kept)."""
    return _jacobi(a, vectors=False)[0]


def _jacobi(a, vectors: bool):
    a = _as_square(a)
    _check_symmetric(a)
    c = a.shape[-1]
    A = 0.5 * (a + np.swapaxes(a, -1, -2))
    batch = A.shape[:-2]
    eye = np.broadcast_to(np.eye(c), batch + (c, c))
    V = eye.copy() if vectors else None
    scale = np.sqrt(np.sum(A * A, axis=(-2, -1)))
    offmask = ~np.eye(c, dtype=bool)

    for sweep in range(MAX_SWEEPS + 1):
        off = np.sqrt(np.sum(np.where(offmask, A * A, 0.0), axis=(-2, -1)))
        if np.all(off <= JACOBI_RTOL * scale):
            break
        if sweep == MAX_SWEEPS:
            raise NoConvergence(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
        for p, q in _round_robin(c):
            apq = A[..., p, q]
            app = A[..., p, p]
            aqq = A[..., q, q]
            nz = apq != 0.0
            theta = np.divide(aqq - app, 2.0 * apq, out=np.zeros_like(apq), where=nz)
            sign = np.where(theta >= 0.0, 1.0, -1.0)
            t = np.where(nz, sign / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            cos = 1.0 / np.sqrt(t * t + 1.0)
            sin = t * cos
            P = eye.copy()
            P[..., p, p] = cos
            P[..., q, q] = cos
            P[..., p, q] = sin
            P[..., q, p] = -sin
            A = np.swapaxes(P, -1, -2) @ A @ P
            A[..., p, q] = 0.0
            A[..., q, p] = 0.0
            if vectors:
                V = V @ P

    w = np.diagonal(A, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    if vectors:
        V = np.take_along_axis(V, order[..., None, :], axis=-1)
    return w, V


def sqrtm_psd(a) -> np.ndarray:
    """Symmetric PSD square root via :func:`eigh`.

    Eigenvalues in ``[-1e-10 * ||a||_F, 0)`` are clamped to zero; anything
    more negative raises :class:`NotPSD`.
    """
    a = _as_square(a)
    w, V = eigh(a)
    band = PSD_CLAMP_RTOL * np.sqrt(np.sum(a * a, axis=(-2, -1)))
    if np.any(w < -band[..., None]):
        raise NotPSD(f"eigenvalue {np.min(w):.3e} below the clamp band")
    root = np.sqrt(np.maximum(w, 0.0))
    out = (V * root[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))
