"""Query-to-class measures: KL, 2-Wasserstein (exact and approximate),
image-to-class top-k cosine, and the contrastive wrapper.

Distribution measures take :class:`GaussianStats` and broadcast over any
leading batch dimensions, so a ``(Q, 1)`` batch of queries against a
``(1, C)`` batch of classes yields a ``(Q, C)`` score matrix.
"""

from __future__ import annotations

import enum
from typing import Callable, Union

import numpy as np

from . import linalg
from .distributions import GaussianStats
from .errors import DimensionMismatch, KTooLarge, NumericalError

KL_CLAMP = 1e-9
WASS_CLAMP = 1e-8


class MeasureKind(enum.Enum):
    KL = "kl"
    WASSERSTEIN_APPROX = "wass-approx"
    WASSERSTEIN_EXACT = "wass-exact"
    I2C = "i2c"

    @property
    def higher_is_closer(self) -> bool:
        return self is MeasureKind.I2C

    @property
    def is_distribution(self) -> bool:
        return self is not MeasureKind.I2C


def _check_pair(q: GaussianStats, s: GaussianStats) -> None:
    if q.dim != s.dim:
        raise DimensionMismatch(f"dimension {q.dim} vs {s.dim}")


def _clamp(value: np.ndarray, band: float, name: str):
    if np.any(value < -band):
        raise NumericalError(f"{name} came out at {np.min(value):.3e}, below -{band:g}")
    value = np.maximum(value, 0.0)
    return float(value) if np.ndim(value) == 0 else value


def kl_divergence(q: GaussianStats, s: GaussianStats):
    """KL(q || s) between two Gaussians, in nats."""
    _check_pair(q, s)
    delta = s.mean - q.mean
    maha = np.sum(delta * linalg.spd_solve(s.factor, delta), axis=-1)
    value = 0.5 * (
        linalg.trace_solve(s.factor, q.cov)
        + linalg.log_det(s.factor)
        - linalg.log_det(q.factor)
        + maha
        - q.dim
    )
    return _clamp(np.asarray(value), KL_CLAMP, "KL divergence")


def wasserstein2_approx(q: GaussianStats, s: GaussianStats):
    """Squared mean distance plus squared Frobenius distance of covariances."""
    _check_pair(q, s)
    dm = q.mean - s.mean
    dc = q.cov - s.cov
    value = np.sum(dm * dm, axis=-1) + np.sum(dc * dc, axis=(-2, -1))
    return float(value) if np.ndim(value) == 0 else value


def wasserstein2_exact(q: GaussianStats, s: GaussianStats):
    """Squared 2-Wasserstein distance between Gaussians (Bures trace term)."""
    _check_pair(q, s)
    dm = q.mean - s.mean
    root_q = linalg.sqrtm_psd(q.cov)
    inner = root_q @ s.cov @ root_q
    inner = 0.5 * (inner + np.swapaxes(inner, -1, -2))
    # trace of the PSD root is the sum of root eigenvalues
    w = linalg.eigvalsh(inner)
    band = linalg.PSD_CLAMP_RTOL * np.sqrt(np.sum(inner * inner, axis=(-2, -1)))
    if np.any(w < -band[..., None]):
        raise linalg.NotPSD(f"eigenvalue {np.min(w):.3e} below the clamp band")
    cross = np.sum(np.sqrt(np.maximum(w, 0.0)), axis=-1)
    trace = np.trace(q.cov, axis1=-2, axis2=-1) + np.trace(s.cov, axis1=-2, axis2=-1)
    value = np.sum(dm * dm, axis=-1) + trace - 2.0 * cross
    return _clamp(np.asarray(value), WASS_CLAMP, "Wasserstein distance")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cosine_matrix(query, pool) -> np.ndarray:
    """Cosine similarity between every query descriptor and pool descriptor.

    Shapes ``(..., n, c)`` and ``(..., m, c)`` give ``(..., n, m)``.
    Zero-norm descriptors have cosine 0 with everything.
    """
    return _unit_rows(np.asarray(query, dtype=np.float64)) @ np.swapaxes(
        _unit_rows(np.asarray(pool, dtype=np.float64)), -1, -2
    )


def topk_row_sums(cos: np.ndarray, k: int) -> np.ndarray:
    """Per row, the sum of its ``k`` largest entries."""
    if k == 1:
        return np.max(cos, axis=-1)
    top = np.sort(cos, axis=-1)[..., -k:]
    return np.sum(top, axis=-1)


def i2c_similarity(query, class_pool, k: int = 1):
    """Image-to-class similarity: sum over query descriptors of the top-k
    cosines to the class's pooled descriptors.

    Broadcasts over leading dimensions of ``query`` ``(..., n, c)`` and
    ``class_pool`` ``(..., m, c)``.
    """
    query = np.asarray(query, dtype=np.float64)
    class_pool = np.asarray(class_pool, dtype=np.float64)
    if query.shape[-1] != class_pool.shape[-1]:
        raise DimensionMismatch(f"dimension {query.shape[-1]} vs {class_pool.shape[-1]}")
    k = int(k)
    if k < 1 or k > class_pool.shape[-2]:
        raise KTooLarge(f"k={k} must lie in [1, {class_pool.shape[-2]}]")
    rows = topk_row_sums(cosine_matrix(query, class_pool), k)
    # sorting before the sum makes the result independent of descriptor order
    value = np.sum(np.sort(rows, axis=-1), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


DISTANCES: dict[MeasureKind, Callable[[GaussianStats, GaussianStats], object]] = {
    MeasureKind.KL: kl_divergence,
    MeasureKind.WASSERSTEIN_APPROX: wasserstein2_approx,
    MeasureKind.WASSERSTEIN_EXACT: wasserstein2_exact,
}


def distance_fn(kind: Union[MeasureKind, str]) -> Callable[[GaussianStats, GaussianStats], object]:
    kind = MeasureKind(kind)
    if not kind.is_distribution:
        raise ValueError(f"{kind.value} is not a distribution-level distance")
    return DISTANCES[kind]


def contrastive(measure, q: GaussianStats, s_i: GaussianStats, s_complement: GaussianStats):
    """``measure(q, s_i) - measure(q, s_complement)``.

    ``measure`` is a distribution-level :class:`MeasureKind` (or its string
    value) or any callable with the same signature as :func:`kl_divergence`.
    """
    fn = measure if callable(measure) else distance_fn(measure)
    _check_pair(q, s_i)
    _check_pair(q, s_complement)
    return fn(q, s_i) - fn(q, s_complement)
