"""Local-descriptor sets, the ADMD dataset file format, and synthetic data.

A descriptor set is a float array of shape ``(n, c)``: ``n`` local
descriptors, each a ``c``-dimensional vector. Datasets store them as
``float32`` so that they survive the binary format bit-for-bit; all the
statistics downstream are computed in ``float64``.

ADMD layout (little-endian)::

    magic "ADMD" | version u32 = 1 | num_classes u32
    per class:  class_id u32 | num_images u32
    per image:  n u32 | c u32 | n*c float32, descriptor-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import DataShapeError, FormatError, InconsistentDim, InvalidSpec, NonFinite
from .rng import STREAM_SYNTH, stream

MAGIC = b"ADMD"
VERSION = 1
COV_KINDS = ("isotropic", "diagonal-random", "random-spd")
EIGEN_RANGE = (0.25, 4.0)

_U32 = struct.Struct("<I")
_U32x2 = struct.Struct("<II")


def as_descriptor_set(d, dtype=np.float64) -> np.ndarray:
    """Validate and return ``d`` as an ``(n, c)`` array."""
    arr = np.asarray(d, dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataShapeError(f"descriptor set must have shape (n>=1, c>=1), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("descriptor set contains NaN or Inf")
    return arr


def flatten_feature_map(values) -> np.ndarray:
    """Turn a ``(c, h, w)`` feature map into ``h*w`` descriptors of size ``c``.

    Descriptor ``row * w + col`` holds ``values[:, row, col]``.
    """
    m = np.asarray(values)
    if m.ndim != 3 or min(m.shape) < 1:
        raise DataShapeError(f"feature map must have shape (c, h, w), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite("feature map contains NaN or Inf")
    c = m.shape[0]
    return np.ascontiguousarray(m.reshape(c, -1).T)


@dataclass(eq=False)
class LabeledDataset:
    """Images grouped by class; ``images[i]`` belongs to ``class_ids[i]``."""

    class_ids: list[int]
    images: list[list[np.ndarray]]

    def __post_init__(self):
        self.class_ids = [int(k) for k in self.class_ids]
        self.images = [
            [np.ascontiguousarray(np.asarray(img, dtype=np.float32)) for img in imgs]
            for imgs in self.images
        ]
        self.validate()

    def validate(self) -> None:
        if len(self.class_ids) != len(self.images):
            raise DataShapeError("class_ids and images must have the same length")
        if not self.class_ids:
            raise DataShapeError("dataset has no classes")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DataShapeError("duplicate class ids")
        dim = None
        for cid, imgs in zip(self.class_ids, self.images):
            if not 0 <= cid < 2**32:
                raise DataShapeError(f"class id {cid} does not fit in u32")
            if not imgs:
                raise DataShapeError(f"class {cid} has no images")
            for img in imgs:
                if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
                    raise DataShapeError(f"class {cid}: bad descriptor set shape {img.shape}")
                if dim is None:
                    dim = img.shape[1]
                elif img.shape[1] != dim:
                    raise InconsistentDim(f"class {cid}: descriptor dim {img.shape[1]} != {dim}")
                if not np.all(np.isfinite(img)):
                    raise NonFinite(f"class {cid}: non-finite descriptor")

    @property
    def dim(self) -> int:
        return self.images[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise KeyError(f"unknown class id {class_id}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        if self.class_ids != other.class_ids:
            return False
        for a, b in zip(self.images, other.images):
            if len(a) != len(b):
                return False
            if any(x.shape != y.shape or x.tobytes() != y.tobytes() for x, y in zip(a, b)):
                return False
        return True


def dataset_to_bytes(dataset: LabeledDataset) -> bytes:
    dataset.validate()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(dataset.num_classes)]
    for cid, imgs in zip(dataset.class_ids, dataset.images):
        parts.append(_U32x2.pack(cid, len(imgs)))
        for img in imgs:
            n, c = img.shape
            parts.append(_U32x2.pack(n, c))
            parts.append(img.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    pos = 0

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > len(buf):
            raise FormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = buf[pos : pos + size]
        pos += size
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an ADMD file")
    (version,) = _U32.unpack(take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported ADMD version {version}")
    (num_classes,) = _U32.unpack(take(4, "class count"))
    class_ids, images, dim = [], [], None
    for k in range(num_classes):
        cid, num_images = _U32x2.unpack(take(8, f"class header {k}"))
        imgs = []
        for j in range(num_images):
            n, c = _U32x2.unpack(take(8, f"image header {j} of class {cid}"))
            if n == 0 or c == 0:
                raise FormatError(f"class {cid} image {j}: empty descriptor set")
            if dim is None:
                dim = c
            elif c != dim:
                raise InconsistentDim(f"class {cid} image {j}: dim {c} != {dim}")
            raw = take(4 * n * c, f"descriptors of class {cid} image {j}")
            imgs.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, c))
        class_ids.append(cid)
        images.append(imgs)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last image")
    try:
        return LabeledDataset(class_ids, images)
    except (DataShapeError, NonFinite) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from exc


def save_dataset(dataset: LabeledDataset, path, class_names: dict[int, str] | None = None) -> None:
    """Write ``dataset`` in ADMD format; optional names go to ``<path>.meta.json``."""
    payload = dataset_to_bytes(dataset)
    path = Path(path)
    path.write_bytes(payload)
    if class_names is not None:
        meta = {"class_names": {str(k): v for k, v in sorted(class_names.items())}}
        Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def load_class_names(path) -> dict[int, str] | None:
    meta = Path(f"{os.fspath(path)}.meta.json")
    if not meta.exists():
        return None
    names = json.loads(meta.read_text()).get("class_names", {})
    return {int(k): str(v) for k, v in names.items()}


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    images_per_class: int
    n: int
    c: int
    separation: float = 3.0
    cov_kind: str = "isotropic"

    def validate(self) -> None:
        for name in ("num_classes", "images_per_class", "n", "c"):
            if int(getattr(self, name)) < 1:
                raise InvalidSpec(f"{name} must be positive, got {getattr(self, name)}")
        if not np.isfinite(self.separation) or self.separation < 0:
            raise InvalidSpec(f"separation must be finite and >= 0, got {self.separation}")
        if self.cov_kind not in COV_KINDS:
            raise InvalidSpec(f"cov_kind must be one of {COV_KINDS}, got {self.cov_kind!r}")


@dataclass(frozen=True)
class ClassParams:
    mean: np.ndarray
    cov: np.ndarray
    factor: np.ndarray = field(repr=False)


def _log_uniform(rng: np.random.Generator, size) -> np.ndarray:
    lo, hi = np.log(EIGEN_RANGE[0]), np.log(EIGEN_RANGE[1])
    return np.exp(rng.uniform(lo, hi, size=size))


def _class_params(spec: SynthSpec, rng: np.random.Generator) -> ClassParams:
    c = spec.c
    direction = rng.standard_normal(c)
    mean = spec.separation * direction / np.linalg.norm(direction)
    if spec.cov_kind == "isotropic":
        cov = np.eye(c)
    elif spec.cov_kind == "diagonal-random":
        cov = np.diag(_log_uniform(rng, c))
    else:
        q, r = np.linalg.qr(rng.standard_normal((c, c)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        cov = (q * _log_uniform(rng, c)) @ q.T
        cov = 0.5 * (cov + cov.T)
    return ClassParams(mean, cov, linalg.cholesky(cov))


def class_parameters(spec: SynthSpec, seed: int) -> list[ClassParams]:
    """The generating mean and covariance of every synthetic class."""
    spec.validate()
    return [_class_params(spec, stream(seed, STREAM_SYNTH, i)) for i in range(spec.num_classes)]


def synth_gaussian_dataset(spec: SynthSpec, seed: int) -> LabeledDataset:
    """Sample a dataset whose class ``i`` draws descriptors from N(mu_i, Sigma_i).

    Class ``i`` uses its own stream ``(seed, STREAM_SYNTH, i)``: parameters
    first, then images in order, each as ``n x c`` standard normals mapped
    through the covariance's Cholesky factor.
    """
    spec.validate()
    images = []
    for i in range(spec.num_classes):
        rng = stream(seed, STREAM_SYNTH, i)
        params = _class_params(spec, rng)
        imgs = []
        for _ in range(spec.images_per_class):
            z = rng.standard_normal((spec.n, spec.c))
            imgs.append((params.mean + z @ params.factor.T).astype(np.float32))
        images.append(imgs)
    return LabeledDataset(list(range(spec.num_classes)), images)
