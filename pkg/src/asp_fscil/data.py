"""Procedural texture datasets, FSCIL task splits and the ASPD v1 file format.

Every class is a pair of oriented sinusoidal gratings with class-specific
frequency, orientation, colour and amplitude. Each sample draws its own
phases (so the per-class mean image is nearly flat and pixel-space centroids
carry little signal), small geometric jitter, a colour cast and pixel noise.
Sample ``i`` of class ``k`` is generated from its own RNG stream derived from
``(seed, k, i)``, which makes generation order-independent.

ASPD v1 layout (little endian)::

    0   4s   magic b"ASPD"
    4   u32  version (1)
    8   u32  N, H, W, C, num_classes, seed_lo, seed_hi
    36  N x (u32 label, H*W*C float32 pixels)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, FormatError
from .tensor import make_rng

MAGIC = b"ASPD"
VERSION = 1
_HEADER = struct.Struct("<4s8I")

_CLASS_STREAM, _SAMPLE_STREAM, _SPLIT_STREAM, _ORDER_STREAM, _CLUTTER_STREAM, _STYLE_STREAM = range(6)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"dataset: images {self.images.shape} vs labels {self.labels.shape}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.seed == other.seed
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))

    def indices_of(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def _class_params(seed: int, k: int) -> dict:
    rng = make_rng(seed, _CLASS_STREAM, k)
    return {
        "freq": rng.uniform(1.0, 4.5, size=2),
        "theta": rng.uniform(0.0, np.pi, size=2),
        "color": rng.uniform(0.2, 1.0, size=(2, 3)),
        "amp": rng.uniform(0.25, 0.45, size=2),
    }


def _render(params: dict, rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u, v = xx / size, yy / size
    img = np.full((size, size, channels), 0.5 + 0.05 * rng.standard_normal())
    cast = 1.0 + 0.15 * rng.standard_normal(channels)
    for g in range(2):
        theta = params["theta"][g] + 0.08 * rng.standard_normal()
        freq = params["freq"][g] * (1.0 + 0.05 * rng.standard_normal())
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
        color = params["color"][g][:channels] * cast
        img += params["amp"][g] * wave[..., None] * color[None, None, :]
    img += 0.04 * rng.standard_normal(img.shape)
    return img


def _add_clutter(img: np.ndarray, rng: np.random.Generator, amp: float) -> np.ndarray:
    """One extra grating with per-sample random frequency, orientation and colour."""
    size, channels = img.shape[0], img.shape[2]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u, v = xx / size, yy / size
    theta, freq = rng.uniform(0.0, np.pi), rng.uniform(1.0, 4.5)
    wave = np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta))
                  + rng.uniform(0.0, 2 * np.pi))
    color = rng.uniform(0.2, 1.0, size=3)[:channels]
    return img + amp * rng.uniform(0.5, 1.0) * wave[..., None] * color[None, None, :]


def _restyle(img: np.ndarray, style: int) -> np.ndarray:
    """0 keeps the image, 1 inverts it, 2 and 3 rotate the colour channels."""
    if style == 1:
        return 1.0 - img
    if style >= 2:
        return np.roll(img, style - 1, axis=-1)
    return img


def generate(num_classes: int, per_class: int, image_size: int = 32, channels: int = 3,
             seed: int = 0, clutter: float = 0.0,
             clutter_classes: Optional[Sequence[int]] = None, styles: int = 1) -> Dataset:
    """``num_classes * per_class`` images, grouped by class in label order.

    ``clutter > 0`` overlays a random distractor grating of that amplitude on
    every sample of ``clutter_classes`` (default: all classes). The distractor
    has its own RNG stream, so uncluttered samples are unaffected by it.
    """
    if num_classes < 1 or per_class < 1:
        raise ConfigError("generate: num_classes and per_class must be >= 1")
    if channels > 3:
        raise ConfigError("generate: at most 3 channels")
    images = np.empty((num_classes * per_class, image_size, image_size, channels), np.float32)
    if clutter < 0:
        raise ConfigError("generate: clutter must be >= 0")
    labels = np.repeat(np.arange(num_classes), per_class)
    cluttered = set(range(num_classes)) if clutter_classes is None else set(clutter_classes)
    for k in range(num_classes):
        params = _class_params(seed, k)
        for i in range(per_class):
            img = _render(params, make_rng(seed, _SAMPLE_STREAM, k, i), image_size, channels)
            if clutter > 0 and k in cluttered:
                img = _add_clutter(img, make_rng(seed, _CLUTTER_STREAM, k, i), clutter)
            img = np.clip(img, 0.0, 1.0)
            if styles > 1 and k in cluttered:
                img = _restyle(img, int(make_rng(seed, _STYLE_STREAM, k, i).integers(styles)))
            images[k * per_class + i] = img
    return Dataset(images, labels, num_classes, seed)


# ---------------------------------------------------------------------------
# FSCIL split
# ---------------------------------------------------------------------------

@dataclass
class Task:
    index: int
    classes: List[int]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class TaskStream:
    pretrain_classes: List[int]
    pretrain_idx: np.ndarray
    tasks: List[Task]
    ways: int
    shots: int
    seed: int = 0

    @property
    def base(self) -> Task:
        return self.tasks[0]

    @property
    def num_incremental(self) -> int:
        return len(self.tasks) - 1

    def seen_classes(self, t: int) -> List[int]:
        return [k for task in self.tasks[: t + 1] for k in task.classes]

    def test_indices(self, t: int) -> np.ndarray:
        """Held-out indices for every class of tasks 0..t."""
        return np.concatenate([task.test_idx for task in self.tasks[: t + 1]])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ways": self.ways,
            "shots": self.shots,
            "pretrain_classes": [int(k) for k in self.pretrain_classes],
            "pretrain_idx": self.pretrain_idx.tolist(),
            "tasks": [{"index": t.index, "classes": [int(k) for k in t.classes],
                       "train_idx": t.train_idx.tolist(), "test_idx": t.test_idx.tolist()}
                      for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskStream":
        tasks = [Task(t["index"], list(t["classes"]), np.asarray(t["train_idx"], np.int64),
                      np.asarray(t["test_idx"], np.int64)) for t in d["tasks"]]
        return cls(list(d["pretrain_classes"]), np.asarray(d["pretrain_idx"], np.int64), tasks,
                   int(d["ways"]), int(d["shots"]), int(d.get("seed", 0)))


def class_order(num_classes: int, seed: int) -> np.ndarray:
    """Seeded class shuffle: the first P entries are pretraining classes, then base, then tasks."""
    return make_rng(seed, _SPLIT_STREAM).permutation(num_classes)


def split_fscil(dataset: Dataset, pretrain_classes: int, base_classes: int, ways: int,
                shots: int, num_tasks: int, test_per_class: int = 20,
                seed: Optional[int] = None) -> TaskStream:
    """Partition classes into pretrain / base / ``num_tasks`` N-way K-shot increments.

    Per-class sample orders come from a stream that does not depend on
    ``shots`` or ``num_tasks``, so K-shot subsets are nested across K and the
    base task is identical for any choice of increments.
    """
    seed = dataset.seed if seed is None else seed
    P, B, N, K = pretrain_classes, base_classes, ways, shots
    if min(P, B) < 0 or B < 1 or num_tasks < 0 or (num_tasks and (N < 1 or K < 1)):
        raise ConfigError("split_fscil: invalid class counts")
    needed = P + B + N * num_tasks
    if needed > dataset.num_classes:
        raise ConfigError(f"split_fscil: need {needed} classes, dataset has {dataset.num_classes}")
    perm = class_order(dataset.num_classes, seed)
    pre = [int(k) for k in perm[:P]]
    base = [int(k) for k in perm[P:P + B]]
    inc = [[int(k) for k in perm[P + B + t * N: P + B + (t + 1) * N]] for t in range(num_tasks)]

    def order(k):
        idx = dataset.indices_of(k)
        return idx[make_rng(seed, _ORDER_STREAM, k).permutation(idx.size)]

    pre_idx = np.concatenate([order(k) for k in pre]) if pre else np.zeros(0, np.int64)

    def make_task(t, classes, shots_):
        train, test = [], []
        for k in classes:
            o = order(k)
            pool = o[test_per_class:]
            take = pool.size if shots_ is None else shots_
            if o.size < test_per_class + max(1, take) or take > pool.size:
                raise ConfigError(
                    f"split_fscil: class {k} has {o.size} samples, needs {test_per_class} test "
                    f"+ {max(1, take)} train")
            test.append(o[:test_per_class])
            train.append(pool[:take])
        return Task(t, list(classes), np.concatenate(train), np.concatenate(test))

    tasks = [make_task(0, base, None)] + [make_task(t + 1, c, K) for t, c in enumerate(inc)]
    return TaskStream(pre, pre_idx, tasks, N, K, seed)


def save_split(stream: TaskStream, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(stream.to_dict(), fh, sort_keys=True)


def load_split(path: str) -> TaskStream:
    try:
        with open(path) as fh:
            return TaskStream.from_dict(json.load(fh))
    except (KeyError, ValueError, TypeError) as e:
        raise FormatError(f"{path}: malformed split file ({e})") from None


def split_path(dataset_path: str) -> str:
    root, _ = os.path.splitext(dataset_path)
    return root + ".split.json"


# ---------------------------------------------------------------------------
# ASPD v1
# ---------------------------------------------------------------------------

def _record_dtype(h: int, w: int, c: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("pixels", "<f4", (h * w * c,))])


def save(dataset: Dataset, path: str) -> None:
    N, H, W, C = dataset.images.shape
    seed = int(dataset.seed) & 0xFFFFFFFFFFFFFFFF
    header = _HEADER.pack(MAGIC, VERSION, N, H, W, C, dataset.num_classes,
                          seed & 0xFFFFFFFF, seed >> 32)
    rec = np.empty(N, dtype=_record_dtype(H, W, C))
    rec["label"] = dataset.labels
    rec["pixels"] = dataset.images.reshape(N, -1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load(path: str) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    return loads(raw, path)


def loads(raw: bytes, name: str = "<bytes>") -> Dataset:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{name}: truncated header at byte {len(raw)}, "
                          f"expected {_HEADER.size} bytes")
    magic, version, N, H, W, C, K, lo, hi = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version} at byte offset 4")
    dt = _record_dtype(H, W, C)
    expected = _HEADER.size + N * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"{name}: payload length mismatch, expected {expected} bytes, "
                          f"got {len(raw)} (at byte offset {min(len(raw), expected)})")
    rec = np.frombuffer(raw, dtype=dt, count=N, offset=_HEADER.size)
    images = rec["pixels"].reshape(N, H, W, C).astype(np.float32)
    labels = rec["label"].astype(np.int64)
    if N and (labels.max() >= K):
        raise FormatError(f"{name}: label {labels.max()} >= num_classes {K}")
    return Dataset(images, labels, K, (hi << 32) | lo)
