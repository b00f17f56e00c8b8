"""Gaussian summaries (mean, regularized covariance) of descriptor populations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .descriptors import as_descriptor_set
from .errors import DataShapeError, DimensionMismatch, InvalidSpec, NonFinite, TooFewClasses

COV_FLOOR = 1e-6
DEFAULT_SHRINKAGE = 0.1


@dataclass(frozen=True)
class GaussianStats:
    """Mean, covariance and cached Cholesky factor of the covariance.

    Fields may carry leading batch dimensions (``mean`` of shape ``(..., c)``,
    ``cov`` and ``factor`` of shape ``(..., c, c)``); every measure broadcasts
    over them.
    """

    mean: np.ndarray
    cov: np.ndarray
    count: int  # an int array when stacked from sets of different sizes
    factor: np.ndarray = field(repr=False)

    @classmethod
    def from_params(cls, mean, cov, count: int = 1) -> "GaussianStats":
        """Wrap a known mean and SPD covariance (no estimation, no shrinkage)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if cov.shape[-2:] != (mean.shape[-1], mean.shape[-1]):
            raise DimensionMismatch(f"mean of shape {mean.shape} vs covariance of shape {cov.shape}")
        return cls(mean, cov, count, linalg.cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mean.shape[:-1]

    def reshape(self, *shape: int) -> "GaussianStats":
        c = self.dim
        return GaussianStats(
            self.mean.reshape(*shape, c),
            self.cov.reshape(*shape, c, c),
            self.count,
            self.factor.reshape(*shape, c, c),
        )

    def __getitem__(self, idx) -> "GaussianStats":
        return GaussianStats(self.mean[idx], self.cov[idx], self.count, self.factor[idx])


def _check_shrinkage(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise InvalidSpec(f"shrinkage must lie in [0, 1], got {lam}")
    return lam


def regularize(scatter: np.ndarray, shrinkage: float) -> np.ndarray:
    """``(1 - lam) S + lam * (tr S / c) I + eps I``."""
    c = scatter.shape[-1]
    eye = np.eye(c)
    level = np.trace(scatter, axis1=-2, axis2=-1)[..., None, None] / c
    return (1.0 - shrinkage) * scatter + (shrinkage * level + COV_FLOOR) * eye


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # x: (..., n, c)
    mean = np.mean(x, axis=-2)
    centred = x - mean[..., None, :]
    scatter = np.swapaxes(centred, -1, -2) @ centred / x.shape[-2]
    return mean, 0.5 * (scatter + np.swapaxes(scatter, -1, -2))


def estimate_stats(d, shrinkage: float = DEFAULT_SHRINKAGE) -> GaussianStats:
    """Maximum-likelihood Gaussian fit with shrinkage toward a scaled identity.

    ``d`` is one descriptor set ``(n, c)`` or a stack ``(..., n, c)`` of sets
    with a common ``n``. The scatter is normalized by ``n``.
    """
    lam = _check_shrinkage(shrinkage)
    x = np.asarray(d, dtype=np.float64)
    if x.ndim == 2:
        x = as_descriptor_set(x)
    elif x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DataShapeError(f"expected descriptors of shape (..., n, c), got {x.shape}")
    elif not np.all(np.isfinite(x)):
        raise NonFinite("descriptor set contains NaN or Inf")
    mean, scatter = _moments(x)
    cov = regularize(scatter, lam)
    return GaussianStats(mean, cov, x.shape[-2], linalg.cholesky(cov))


def _concat(images) -> np.ndarray:
    if len(images) == 0:
        raise DataShapeError("need at least one descriptor set")
    sets = [as_descriptor_set(img) for img in images]
    dims = {s.shape[1] for s in sets}
    if len(dims) != 1:
        raise DimensionMismatch(f"descriptor sets disagree on dimension: {sorted(dims)}")
    return sets[0] if len(sets) == 1 else np.concatenate(sets, axis=0)


def pool_class_stats(images, shrinkage: float = DEFAULT_SHRINKAGE) -> GaussianStats:
    """Stats of all descriptors of all images of one class, pooled."""
    return estimate_stats(_concat(images), shrinkage)


def pool_complement_stats(classes, exclude: int, shrinkage: float = DEFAULT_SHRINKAGE) -> GaussianStats:
    """Stats pooled over every class except ``classes[exclude]``."""
    if len(classes) < 2:
        raise TooFewClasses(f"complement needs at least 2 classes, got {len(classes)}")
    if not 0 <= exclude < len(classes):
        raise IndexError(f"class index {exclude} out of range for {len(classes)} classes")
    rest = [img for j, imgs in enumerate(classes) if j != exclude for img in imgs]
    return pool_class_stats(rest, shrinkage)


def stack_stats(stats: list[GaussianStats]) -> GaussianStats:
    """Stack single stats into one batched :class:`GaussianStats`."""
    if not stats:
        raise DataShapeError("nothing to stack")
    counts = [s.count for s in stats]
    return GaussianStats(
        np.stack([s.mean for s in stats]),
        np.stack([s.cov for s in stats]),
        counts[0] if len(set(counts)) == 1 else np.array(counts),
        np.stack([s.factor for s in stats]),
    )
