"""C-way K-shot episode sampling and class splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import LabeledDataset
from .errors import DataShapeError, InsufficientClasses, InsufficientImages, InvalidSpec
from .rng import STREAM_EPISODE, stream

DEFAULT_QUERIES = 15


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 1
    queries: int = DEFAULT_QUERIES

    def __post_init__(self):
        for name in ("ways", "shots", "queries"):
            if int(getattr(self, name)) < 1:
                raise InvalidSpec(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def images_needed(self) -> int:
        return self.shots + self.queries


@dataclass(frozen=True)
class Episode:
    """One sampled task.

    Labels are episode-local (``0..C-1``); ``class_ids[label]`` is the
    dataset class id. ``support_images`` / ``query_images`` record which
    image index of the class each set came from.
    """

    support: list[list[np.ndarray]]
    query: list[np.ndarray]
    query_labels: np.ndarray
    class_ids: list[int]
    support_images: list[list[int]]
    query_images: list[int]

    @property
    def ways(self) -> int:
        return len(self.support)

    @property
    def shots(self) -> int:
        return len(self.support[0])


@dataclass(frozen=True)
class SplitSpec:
    train: list[int]
    val: list[int]
    test: list[int]

    def __post_init__(self):
        roles = [set(self.train), set(self.val), set(self.test)]
        sizes = [len(self.train), len(self.val), len(self.test)]
        if [len(r) for r in roles] != sizes:
            raise DataShapeError("a split role lists the same class twice")
        if roles[0] & roles[1] or roles[0] & roles[2] or roles[1] & roles[2]:
            raise DataShapeError("split roles must be pairwise disjoint")

    def role(self, name: str) -> list[int]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split role {name!r}")
        return list(getattr(self, name))

    def check_against(self, dataset: LabeledDataset) -> None:
        known = set(dataset.class_ids)
        missing = sorted(set(self.train + self.val + self.test) - known)
        if missing:
            raise DataShapeError(f"split names classes not in the dataset: {missing}")

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test})

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        raw = json.loads(text)
        try:
            return cls(*([int(k) for k in raw[role]] for role in ("train", "val", "test")))
        except (KeyError, TypeError) as exc:
            raise DataShapeError(f"split JSON needs integer lists train/val/test: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text())


def make_split(class_ids: list[int], fractions=(0.5, 0.25, 0.25)) -> SplitSpec:
    """Contiguous train/val/test split of ``class_ids`` in the given order."""
    total = len(class_ids)
    n_train = int(round(fractions[0] * total))
    n_val = int(round(fractions[1] * total))
    n_val = min(n_val, total - n_train)
    return SplitSpec(
        list(class_ids[:n_train]),
        list(class_ids[n_train : n_train + n_val]),
        list(class_ids[n_train + n_val :]),
    )


def episode_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for episode ``index`` under ``seed``."""
    return stream(seed, STREAM_EPISODE, index)


def sample_episode(
    dataset: LabeledDataset, split, spec: EpisodeSpec, rng: np.random.Generator
) -> Episode:
    """Draw ``spec.ways`` classes from ``split`` and split their images.

    Classes are drawn without replacement from those in ``split`` with at
    least ``shots + queries`` images; per class ``shots + queries`` images
    are drawn without replacement, the first ``shots`` going to the support.
    """
    split = [int(k) for k in split]
    if len(split) < spec.ways:
        raise InsufficientClasses(f"{spec.ways}-way episode from a split of {len(split)} classes")
    eligible = [k for k in split if len(dataset.images[dataset.index_of(k)]) >= spec.images_needed]
    if len(eligible) < spec.ways:
        raise InsufficientImages(
            f"only {len(eligible)} classes have the {spec.images_needed} images a "
            f"{spec.ways}-way {spec.shots}-shot episode with {spec.queries} queries needs"
        )
    chosen = rng.choice(len(eligible), size=spec.ways, replace=False)
    support, support_idx, query, query_idx, labels, class_ids = [], [], [], [], [], []
    for label, pos in enumerate(chosen):
        cid = eligible[int(pos)]
        imgs = dataset.images[dataset.index_of(cid)]
        picks = [int(i) for i in rng.choice(len(imgs), size=spec.images_needed, replace=False)]
        support.append([imgs[i] for i in picks[: spec.shots]])
        support_idx.append(picks[: spec.shots])
        for i in picks[spec.shots :]:
            query.append(imgs[i])
            query_idx.append(i)
            labels.append(label)
        class_ids.append(cid)
    return Episode(support, query, np.array(labels, dtype=np.int64), class_ids, support_idx, query_idx)
