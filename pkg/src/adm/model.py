"""Scoring head: branch scores, standardization + weighted fusion,
nearest-neighbour classification, and episodic evaluation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .descriptors import LabeledDataset
from .distributions import (
    DEFAULT_SHRINKAGE,
    GaussianStats,
    estimate_stats,
    pool_class_stats,
    pool_complement_stats,
    stack_stats,
)
from .episodes import Episode, EpisodeSpec, episode_stream, sample_episode
from .errors import DataShapeError, DimensionMismatch, InvalidSpec, MissingContext
from .measures import MeasureKind, distance_fn, i2c_similarity

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MODES = ("episode-stats", "running-stats", "off")
MEASURES = ("kl", "wass-approx", "wass-exact", "i2c", "adm")
ABLATION_ROWS = ("wass-approx", "wass-approx+cms", "kl", "kl+cms", "i2c", "adm")
# keeps each cosine block around this many entries
_I2C_BLOCK = 1 << 22


@dataclass(frozen=True)
class Embedding:
    """Per-descriptor map: identity, or ``y = M x`` with ``M`` of shape (out, in)."""

    kind: str = "identity"
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "identity":
            if self.matrix is not None:
                raise InvalidSpec("identity embedding takes no matrix")
        elif self.kind == "linear":
            m = np.array(self.matrix, dtype=np.float64)
            if m.ndim != 2 or min(m.shape) < 1 or not np.all(np.isfinite(m)):
                raise InvalidSpec(f"linear embedding needs a finite 2-D matrix, got shape {m.shape}")
            object.__setattr__(self, "matrix", m)
        else:
            raise InvalidSpec(f"embedding kind must be identity or linear, got {self.kind!r}")

    @classmethod
    def linear(cls, matrix) -> "Embedding":
        return cls("linear", matrix)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x
        if x.shape[-1] != self.matrix.shape[1]:
            raise DimensionMismatch(
                f"embedding expects dim {self.matrix.shape[1]}, descriptors have {x.shape[-1]}"
            )
        return x @ self.matrix.T

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "linear":
            out["matrix"] = self.matrix.tolist()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "Embedding":
        return cls(raw["kind"], raw.get("matrix"))


def _vec2(x, name: str) -> np.ndarray:
    v = np.array(x, dtype=np.float64).reshape(-1)
    if v.shape != (2,) or not np.all(np.isfinite(v)):
        raise InvalidSpec(f"{name} must be 2 finite numbers, got {x!r}")
    return v


@dataclass(frozen=True)
class FusionHead:
    """Fusion weights ``w = [w_dist, w_i2c]`` and per-branch standardization.

    Index 0 of ``gamma``/``beta``/running stats is the distance branch,
    index 1 the image-to-class branch.
    """

    w: np.ndarray = field(default_factory=lambda: np.ones(2))
    gamma: np.ndarray = field(default_factory=lambda: np.ones(2))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    mode: str = "episode-stats"
    running_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    running_var: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        for name in ("w", "gamma", "beta", "running_mean", "running_var"):
            object.__setattr__(self, name, _vec2(getattr(self, name), name))
        if np.any(self.gamma <= 0):
            raise InvalidSpec("gamma must be positive")
        if np.any(self.running_var < 0):
            raise InvalidSpec("running_var must be non-negative")
        if self.mode not in MODES:
            raise InvalidSpec(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(),
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "mode": self.mode,
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FusionHead":
        return cls(**{f.name: raw[f.name] for f in fields(cls) if f.name in raw})


def _uniform_stack(sets: Sequence[np.ndarray]) -> Optional[np.ndarray]:
    if len({s.shape for s in sets}) == 1:
        return np.stack(sets)
    return None


def _query_stats(queries: list[np.ndarray], shrinkage: float) -> GaussianStats:
    stacked = _uniform_stack(queries)
    if stacked is not None:
        return estimate_stats(stacked, shrinkage)
    return stack_stats([estimate_stats(q, shrinkage) for q in queries])


def _i2c_column(queries: list[np.ndarray], pool: np.ndarray, k: int) -> np.ndarray:
    stacked = _uniform_stack(queries)
    if stacked is None:
        return np.array([i2c_similarity(q, pool, k) for q in queries])
    n = stacked.shape[1]
    chunk = max(1, _I2C_BLOCK // (n * pool.shape[0]))
    return np.concatenate(
        [np.atleast_1d(i2c_similarity(stacked[i : i + chunk], pool, k)) for i in range(0, len(stacked), chunk)]
    )


def branch_scores(
    episode: Episode,
    embedding: Embedding = Embedding(),
    shrinkage: float = DEFAULT_SHRINKAGE,
    k: int = 1,
    distance: Optional[MeasureKind | str] = MeasureKind.KL,
    cms: bool = False,
    with_i2c: bool = True,
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Score every query against every class.

    Returns ``(dist, i2c)``, each of shape ``(num_queries, ways)`` or
    ``None`` when that branch is switched off. ``dist[j, i]`` is the
    distribution distance from query ``j`` to class ``i`` (contrastive if
    ``cms``); ``i2c[j, i]`` the image-to-class similarity.
    """
    support = [[embedding.apply(img) for img in imgs] for imgs in episode.support]
    queries = [embedding.apply(q) for q in episode.query]
    dist = i2c = None
    if distance is not None:
        fn = distance_fn(distance)
        ways = len(support)
        q_stats = _query_stats(queries, shrinkage).reshape(len(queries), 1)
        c_stats = stack_stats([pool_class_stats(imgs, shrinkage) for imgs in support]).reshape(1, ways)
        dist = np.asarray(fn(q_stats, c_stats))
        if cms:
            comp = stack_stats(
                [pool_complement_stats(support, i, shrinkage) for i in range(ways)]
            ).reshape(1, ways)
            dist = dist - np.asarray(fn(q_stats, comp))
    if with_i2c:
        pools = [np.concatenate(imgs, axis=0) for imgs in support]
        i2c = np.stack([_i2c_column(queries, pool, k) for pool in pools], axis=1)
    return dist, i2c


def standardize(
    scores: np.ndarray, branch: int, head: FusionHead, context: Optional[np.ndarray] = None
) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if head.mode == "off":
        return scores
    if head.mode == "episode-stats":
        if context is None:
            raise MissingContext("episode-stats standardization needs the episode's score batch")
        context = np.asarray(context, dtype=np.float64)
        mean, var = float(np.mean(context)), float(np.var(context))
    else:
        mean, var = head.running_mean[branch], head.running_var[branch]
    return head.gamma[branch] * (scores - mean) / math.sqrt(var + BN_EPS) + head.beta[branch]


def fuse(dist_scores, i2c_scores, head: FusionHead, context=None) -> np.ndarray:
    """``-w1 * dist + w2 * i2c`` after per-branch standardization.

    ``context`` is the ``(dist_batch, i2c_batch)`` pair of all the episode's
    query scores; required in ``episode-stats`` mode.
    """
    dist_scores = np.asarray(dist_scores, dtype=np.float64)
    i2c_scores = np.asarray(i2c_scores, dtype=np.float64)
    if dist_scores.shape != i2c_scores.shape:
        raise DimensionMismatch(f"branch shapes differ: {dist_scores.shape} vs {i2c_scores.shape}")
    ctx_d, ctx_i = context if context is not None else (None, None)
    z_d = standardize(dist_scores, 0, head, ctx_d)
    z_i = standardize(i2c_scores, 1, head, ctx_i)
    return -head.w[0] * z_d + head.w[1] * z_i


def classify(fused) -> int | np.ndarray:
    """Index of the highest score; ties go to the lowest index."""
    out = np.argmax(np.asarray(fused), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class MeasureConfig:
    measure: str = "kl"
    cms: bool = False
    shrinkage: float = DEFAULT_SHRINKAGE
    k: int = 1
    embedding: Embedding = Embedding()
    head: FusionHead = FusionHead()

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise InvalidSpec(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.cms and self.measure == "i2c":
            raise InvalidSpec("the contrastive strategy applies to distribution measures only")
        if int(self.k) < 1:
            raise InvalidSpec(f"k must be positive, got {self.k}")
        if not 0.0 <= float(self.shrinkage) <= 1.0:
            raise InvalidSpec(f"shrinkage must lie in [0, 1], got {self.shrinkage}")

    @property
    def distance(self) -> Optional[MeasureKind]:
        if self.measure == "adm":
            return MeasureKind.KL
        if self.measure == "i2c":
            return None
        return MeasureKind(self.measure)

    @property
    def name(self) -> str:
        return self.measure + ("+cms" if self.cms else "")

    @classmethod
    def from_row(cls, row: str, **kwargs) -> "MeasureConfig":
        measure, _, flag = row.partition("+")
        if flag not in ("", "cms"):
            raise InvalidSpec(f"unknown measure row {row!r}")
        return cls(measure=measure, cms=flag == "cms", **kwargs)

    def echo(self) -> dict:
        out = {"measure": self.measure, "cms": self.cms, "shrinkage": float(self.shrinkage), "k": int(self.k)}
        if self.measure == "adm":
            out["mode"] = self.head.mode
            out["w"] = self.head.w.tolist()
        return out


def predict(episode: Episode, config: MeasureConfig) -> np.ndarray:
    """Predicted episode-local label of every query."""
    dist, i2c = branch_scores(
        episode,
        config.embedding,
        config.shrinkage,
        config.k,
        distance=config.distance,
        cms=config.cms,
        with_i2c=config.measure in ("i2c", "adm"),
    )
    if config.measure == "i2c":
        return classify(i2c)
    if config.measure == "adm":
        return classify(fuse(dist, i2c, config.head, context=(dist, i2c)))
    return classify(-dist)


@dataclass(frozen=True)
class EvalReport:
    mean_acc: float
    ci95: float
    tasks: int
    reps: int
    config: dict
    task_accuracies: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "mean_acc": self.mean_acc,
            "ci95": self.ci95,
            "tasks": self.tasks,
            "reps": self.reps,
            "config": self.config,
        }


def summarize(accuracies: Sequence[float], tasks: int, reps: int, config: dict) -> EvalReport:
    """Mean accuracy and 95% half-width ``1.96 * std / sqrt(count)``.

    ``std`` is the sample standard deviation (``ddof=1``) of the per-task
    accuracies; a single task gives a half-width of 0.
    """
    accs = np.asarray(accuracies, dtype=np.float64)
    count = accs.size
    sigma = float(np.std(accs, ddof=1)) if count > 1 else 0.0
    return EvalReport(
        float(np.mean(accs)),
        1.96 * sigma / math.sqrt(count),
        int(tasks),
        int(reps),
        config,
        tuple(float(a) for a in accs),
    )


def episode_accuracy(
    dataset: LabeledDataset, split, spec: EpisodeSpec, config: MeasureConfig, seed: int, index: int
) -> float:
    episode = sample_episode(dataset, split, spec, episode_stream(seed, index))
    return float(np.mean(predict(episode, config) == episode.query_labels))


def evaluate(
    dataset: LabeledDataset,
    split,
    spec: EpisodeSpec,
    config: MeasureConfig,
    tasks: int = 1000,
    reps: int = 5,
    seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Run ``reps`` repetitions of ``tasks`` episodes and summarize accuracy.

    Episode ``t`` of repetition ``r`` uses stream index ``r * tasks + t``, so
    the report does not depend on ``workers``.
    """
    if tasks < 1 or reps < 1:
        raise InvalidSpec("tasks and reps must be positive")
    split = list(split)
    if len(split) < spec.ways:
        raise DataShapeError(f"{spec.ways}-way evaluation on a split of {len(split)} classes")
    indices = range(tasks * reps)

    def run(i: int) -> float:
        return episode_accuracy(dataset, split, spec, config, seed, i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run, indices))
    else:
        accs = [run(i) for i in indices]
    echo = dict(config.echo(), ways=spec.ways, shots=spec.shots, queries=spec.queries, seed=int(seed))
    return summarize(accs, tasks, reps, echo)


def ablate(
    dataset: LabeledDataset,
    split,
    spec: EpisodeSpec,
    rows: Sequence[str] = ABLATION_ROWS,
    tasks: int = 1000,
    reps: int = 1,
    seed: int = 0,
    workers: int = 1,
    **config_kwargs,
) -> list[tuple[str, EvalReport]]:
    """Evaluate several measure rows on the same episodes, best first.

    Ties in mean accuracy keep the order in which ``rows`` were given.
    """
    results = []
    for row in rows:
        config = MeasureConfig.from_row(row, **config_kwargs)
        results.append((row, evaluate(dataset, split, spec, config, tasks, reps, seed, workers)))
    return sorted(results, key=lambda item: -item[1].mean_acc)


def with_running_stats(head: FusionHead, dist: np.ndarray, i2c: np.ndarray) -> FusionHead:
    """Exponential moving update of the head's running branch statistics."""
    batch_mean = np.array([np.mean(dist), np.mean(i2c)])
    batch_var = np.array([np.var(dist), np.var(i2c)])
    return replace(
        head,
        running_mean=(1 - BN_MOMENTUM) * head.running_mean + BN_MOMENTUM * batch_mean,
        running_var=(1 - BN_MOMENTUM) * head.running_var + BN_MOMENTUM * batch_var,
    )


__all__ = [
    "Embedding",
    "FusionHead",
    "MeasureConfig",
    "EvalReport",
    "branch_scores",
    "standardize",
    "fuse",
    "classify",
    "predict",
    "summarize",
    "evaluate",
    "ablate",
    "with_running_stats",
]
