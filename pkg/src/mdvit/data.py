"""Procedural image-classification data and the flat binary tensor format.

Class identity lives in a few fixed patch positions; every other patch holds
class-independent distractor textures. Token relevance is therefore uneven,
which is what sequence reduction needs to be meaningful.

Binary tensor files start with a header padded to 16 bytes: magic ``MDVP``,
format version (u16), rank (u16), then one u32 per extent, all
little-endian. Version 1 stores float32 values, version 2 float64. Labels go
to a sibling file of raw little-endian u16 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

MAGIC = b"MDVP"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    train_per_class: int = 256
    val_per_class: int = 64
    holdout_per_class: int = 256
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    noise: float = 1.5
    informative_patches: int = 4
    keep_prob: float = 0.7

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    val: Split
    holdout: Split
    informative: np.ndarray  # patch indices (row-major grid) that carry the class signal


def synth_dataset(spec: DatasetSpec = DatasetSpec(), seed: int = 0) -> Dataset:
    """Deterministic class-balanced train/val/holdout splits."""
    rng = np.random.default_rng([seed, 0])
    g = spec.image_size // spec.patch_size
    c, p = spec.channels, spec.patch_size
    informative = np.sort(rng.choice(g * g, size=spec.informative_patches, replace=False))
    templates = rng.normal(size=(spec.num_classes, spec.informative_patches, c, p, p))
    distractors = rng.normal(size=(2 * spec.num_classes, c, p, p))

    def make(per_class: int, stream: int) -> Split:
        r = np.random.default_rng([seed, stream])
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[r.permutation(len(labels))]
        n = len(labels)
        grid = np.empty((n, g * g, c, p, p))
        pick = r.integers(len(distractors), size=(n, g * g))
        amp = r.uniform(0.5, 1.5, size=(n, g * g, 1, 1, 1))
        grid[:] = distractors[pick] * amp
        present = r.uniform(size=(n, spec.informative_patches)) < spec.keep_prob
        present[np.arange(n), r.integers(spec.informative_patches, size=n)] = True
        signal = templates[labels] * amp[:, informative]
        grid[:, informative] = np.where(present[:, :, None, None, None], signal, grid[:, informative])
        grid += spec.noise * r.normal(size=grid.shape)
        images = grid.reshape(n, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, g * p, g * p)
        return Split(images, labels.astype(np.int64))

    return Dataset(make(spec.train_per_class, 1), make(spec.val_per_class, 2),
                   make(spec.holdout_per_class, 3), informative)


def write_tensor(path, array, version: int = 2) -> None:
    arr = np.asarray(array)
    if version not in _DTYPES:
        raise ValueError(f"unsupported tensor format version {version}")
    head = MAGIC + struct.pack("<HH", version, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += b"\0" * (-len(head) % 16)
    Path(path).write_bytes(head + np.ascontiguousarray(arr, dtype=_DTYPES[version]).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MDVP tensor file")
    version, rank = struct.unpack_from("<HH", raw, 4)
    if version not in _DTYPES:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    start = 8 + 4 * rank
    start += -start % 16
    dt = _DTYPES[version]
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - start != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype=dt, count=count, offset=start).astype(np.float64).reshape(shape)


def write_labels(path, labels) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype="<u2").tobytes())


def read_labels(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<u2").astype(np.int64)


def save_split(directory, name: str, split: Split, version: int = 1) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / f"{name}.mdvp", split.images, version)
    write_labels(d / f"{name}.labels", split.labels)


def load_split(directory, name: str) -> Split:
    d = Path(directory)
    return Split(read_tensor(d / f"{name}.mdvp"), read_labels(d / f"{name}.labels"))
