"""Datasets: a synthetic Gaussian-blob image generator and a PGM directory loader.

Directory layout: ``<root>/<class_label>/<sample>.pgm``, each a binary P5
16x16 8-bit image.  Labels are the sorted class directory names.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray  # (N, 1, H, W) in [0, 1]
    y: np.ndarray  # (N,) int64
    class_names: list

    def __len__(self):
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.class_names)


def blob_dataset(n: int, num_classes: int, seed: int, size: int = 16, noise: float = 0.3,
                 sigma: float = 2.0, jitter: float = 1.2) -> Dataset:
    """Images of one bright Gaussian blob whose center depends on the class.

    Class centers are spread on a circle; each sample jitters its center and
    adds pixel noise, so neighbouring classes overlap a little and a small
    CNN lands in the mid to high 90s rather than at 100%.
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = size / 4
    centers = np.stack([size / 2 - 0.5 + radius * np.sin(angles),
                        size / 2 - 0.5 + radius * np.cos(angles)], axis=1)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    mu = centers[y] + rng.normal(0, jitter, size=(n, 2))
    r = np.arange(size)
    dr = (r[None, :, None] - mu[:, 0, None, None]) ** 2
    dc = (r[None, None, :] - mu[:, 1, None, None]) ** 2
    img = np.exp(-(dr + dc) / (2 * sigma**2)) + rng.normal(0, noise, size=(n, size, size))
    X = np.clip(img, 0.0, 1.0)[:, None, :, :]
    return Dataset(X, y.astype(np.int64), [f"class{c}" for c in range(num_classes)])


def partition(ds: Dataset, parts: int, seed: int) -> list[Dataset]:
    """Disjoint, evenly sized shards (the remainder is dropped)."""
    idx = np.random.default_rng(seed).permutation(len(ds))
    per = len(ds) // parts
    return [ds.subset(np.sort(idx[i * per:(i + 1) * per])) for i in range(parts)]


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary P5 reader; returns uint8 (H, W)."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(v) for v in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w)


def load_image_dir(root, size: int = 16) -> Dataset:
    root = Path(root)
    names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not names:
        raise FileNotFoundError(f"no class directories under {root}")
    X, y = [], []
    for label, name in enumerate(names):
        for f in sorted((root / name).glob("*.pgm")):
            img = read_pgm(f)
            if img.shape != (size, size):
                raise ValueError(f"{f}: expected {size}x{size}, got {img.shape[1]}x{img.shape[0]}")
            X.append(img.astype(np.float64) / 255.0)
            y.append(label)
    if not X:
        raise FileNotFoundError(f"no .pgm images under {root}")
    return Dataset(np.stack(X)[:, None], np.array(y, dtype=np.int64), names)


def write_image_dir(root, ds: Dataset):
    for name in ds.class_names:
        os.makedirs(Path(root) / name, exist_ok=True)
    counts = {}
    for x, label in zip(ds.X, ds.y):
        name = ds.class_names[label]
        i = counts.get(name, 0)
        counts[name] = i + 1
        write_pgm(Path(root) / name / f"{i:05d}.pgm", x[0])
