"""Dataset ingestion from the standard published file formats, plus a seeded
synthetic generator for offline runs.

Files are looked up under ``$IGFLAB_DATA_DIR`` (default ``~/.cache/igflab``):

    mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
    fashion-mnist/ (same names)
    cifar-10-batches-py/{data_batch_1..5,test_batch}
    cifar-100-python/{train,test}
"""
from __future__ import annotations

import gzip
import os
import pickle
import struct
from pathlib import Path

import numpy as np

DATASETS = ("mnist", "fashion-mnist", "cifar10", "cifar100", "synthetic")
ENV_VAR = "IGFLAB_DATA_DIR"


class DatasetUnavailable(FileNotFoundError):
    pass


def data_dir() -> Path:
    return Path(os.environ.get(ENV_VAR, Path.home() / ".cache" / "igflab")).expanduser()


def _open(path: Path):
    for cand in (path, path.with_name(path.name + ".gz")):
        if cand.exists():
            return gzip.open(cand, "rb") if cand.suffix == ".gz" else open(cand, "rb")
    raise DatasetUnavailable(str(path))


def read_idx(path: Path) -> np.ndarray:
    with _open(path) as fh:
        zero, dtype_code, ndim = struct.unpack(">HBB", fh.read(4))
        if zero != 0 or dtype_code != 0x08:
            raise ValueError(f"{path}: not an unsigned-byte IDX file")
        dims = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated IDX payload")
    return data.reshape(dims)


def _load_idx_dataset(root: Path) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for split in ("train", "t10k"):
        try:
            x = read_idx(root / f"{split}-images-idx3-ubyte")
            y = read_idx(root / f"{split}-labels-idx1-ubyte")
        except DatasetUnavailable:
            continue
        xs.append(x)
        ys.append(y)
    if not xs:
        raise DatasetUnavailable(f"no IDX files under {root}")
    x = np.concatenate(xs).astype(np.float32)[:, None] / 255.0
    return x, np.concatenate(ys).astype(np.int64)


def _load_cifar(root: Path, files: list[str], label_key: str) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for name in files:
        path = root / name
        if not path.exists():
            continue
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch[label_key.encode()], dtype=np.int64))
    if not xs:
        raise DatasetUnavailable(f"no CIFAR batches under {root}")
    return np.concatenate(xs).astype(np.float32) / 255.0, np.concatenate(ys)


def synthetic(n: int = 4000, shape=(1, 28, 28), num_classes: int = 10, rank: int = 6,
              seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded low-rank images: a smooth per-class template plus a random
    combination of ``rank`` smooth shared modes, squashed into [0, 1]."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")

    def blob_field(k):
        out = np.zeros((k, c, h, w))
        for i in range(k):
            for _ in range(3):
                cy, cx = rng.uniform(-0.6, 0.6, 2)
                s = rng.uniform(0.15, 0.4)
                amp = rng.uniform(0.5, 1.5, size=(c, 1, 1))
                out[i] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return out

    templates = blob_field(num_classes)
    modes = blob_field(rank) - 0.5 * blob_field(rank)
    labels = rng.integers(0, num_classes, size=n)
    coeffs = rng.normal(0.0, 0.5, size=(n, rank))
    fields = templates[labels] + np.tensordot(coeffs, modes, axes=(1, 0))
    images = 1.0 / (1.0 + np.exp(-3.0 * (fields - 0.6)))
    return images.astype(np.float32), labels.astype(np.int64)


def load_dataset(name: str, root: str | Path | None = None, *, synthetic_n: int = 10000,
                 shape=(1, 28, 28), seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return (images float32 (n, C, H, W) in [0, 1], labels int64)."""
    root = Path(root) if root is not None else data_dir()
    if name == "mnist":
        return _load_idx_dataset(root / "mnist")
    if name == "fashion-mnist":
        return _load_idx_dataset(root / "fashion-mnist")
    if name == "cifar10":
        files = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
        return _load_cifar(root / "cifar-10-batches-py", files, "labels")
    if name == "cifar100":
        return _load_cifar(root / "cifar-100-python", ["train", "test"], "fine_labels")
    if name == "synthetic":
        return synthetic(synthetic_n, shape, seed=seed)
    raise ValueError(f"unknown dataset {name!r}")


def num_classes(name: str) -> int:
    return 100 if name == "cifar100" else 10
