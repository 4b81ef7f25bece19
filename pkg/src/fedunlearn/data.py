"""Datasets: IDX ingestion, seeded synthetic blobs, and the bundled MNIST subset."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class MalformedIDX(ValueError):
    pass


class InconsistentCounts(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (n, input_dim), values in [0, 1]
    y: np.ndarray  # (n,) class indices, or (n, tasks) for multi-task data

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise InconsistentCounts(f"{self.x.shape[0]} inputs vs {self.y.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def num_tasks(self) -> int:
        return 1 if self.y.ndim == 1 else int(self.y.shape[1])

    def labels(self, task: int = 0) -> np.ndarray:
        return self.y if self.y.ndim == 1 else self.y[:, task]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    @classmethod
    def empty_like(cls, other: "Dataset") -> "Dataset":
        return other.subset(np.zeros(0, dtype=np.int64))


@dataclass
class DatasetBundle:
    train: Dataset
    test: Dataset
    num_classes: tuple[int, ...]
    provenance: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return int(self.train.x.shape[1])


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expect_magic: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX array (big-endian header)."""
    if len(raw) < 4:
        raise MalformedIDX("file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08:
        raise MalformedIDX(f"unsupported magic 0x{magic:08x} (only unsigned-byte IDX is read)")
    if expect_magic is not None and magic != expect_magic:
        raise MalformedIDX(f"magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    if ndim == 0 or len(raw) < 4 + 4 * ndim:
        raise MalformedIDX("truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    body = raw[4 + 4 * ndim :]
    if len(body) != count:
        raise MalformedIDX(f"header promises {count} bytes of data, file holds {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("only uint8 arrays are written")
    header = struct.pack(">I", 0x00000800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def read_idx_pair(images_path: str | Path, labels_path: str | Path) -> Dataset:
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise InconsistentCounts(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def write_idx_pair(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    Path(images_path).write_bytes(encode_idx(np.asarray(images, dtype=np.uint8)))
    Path(labels_path).write_bytes(encode_idx(np.asarray(labels, dtype=np.uint8)))


def select_classes(ds: Dataset, classes: Sequence[int], per_class: Optional[int] = None, seed: int = 0) -> Dataset:
    """Keep the listed classes (relabelled 0..k-1 in the given order), optionally capped per class."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for new, c in enumerate(classes):
        idx = np.flatnonzero(ds.y == c)
        if per_class is not None:
            if len(idx) < per_class:
                raise InconsistentCounts(f"class {c} has {len(idx)} samples, {per_class} requested")
            idx = np.sort(rng.choice(idx, per_class, replace=False))
        xs.append(ds.x[idx])
        ys.append(np.full(len(idx), new))
    return Dataset(np.concatenate(xs), np.concatenate(ys))


# ---------------------------------------------------------------------------
# generators


def make_blobs(
    num_classes: int = 4,
    n: int = 6000,
    dim: int = 784,
    spread: float = 0.15,
    seed: int = 0,
) -> Dataset:
    """Seeded Gaussian blobs clipped to [0, 1]; classes as balanced as n allows."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = np.clip(centers[y] + rng.normal(scale=spread, size=(n, dim)), 0.0, 1.0)
    return Dataset(x, y)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class stratified split."""
    rng = np.random.default_rng(seed)
    labels = ds.labels(0)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


def bundled_mnist(classes: Sequence[int] = (0, 1, 2, 3)) -> tuple[np.ndarray, np.ndarray]:
    """The 5000-image MNIST sample shipped inside ``mlxtend`` (500 per digit), as uint8."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - dependency declared
        raise RuntimeError("mlxtend is needed for the bundled MNIST subset") from exc
    x, y = mnist_data()
    keep = np.isin(y, np.asarray(classes))
    return x[keep].reshape(-1, 28, 28).astype(np.uint8), y[keep].astype(np.uint8)


def export_mnist_idx(
    out_dir: str | Path,
    classes: Sequence[int] = (0, 1, 2, 3),
    test_fraction: float = 0.2,
    seed: int = 0,
) -> dict[str, Path]:
    """Write the bundled MNIST subset as train/test IDX files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = bundled_mnist(classes)
    ds = Dataset(images.reshape(len(images), -1), labels)
    tr, te = train_test_split(ds, test_fraction, seed)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "test-images-idx3-ubyte",
        "test_labels": out / "test-labels-idx1-ubyte",
    }
    write_idx_pair(tr.x.reshape(-1, 28, 28).astype(np.uint8), tr.y, paths["train_images"], paths["train_labels"])
    write_idx_pair(te.x.reshape(-1, 28, 28).astype(np.uint8), te.y, paths["test_images"], paths["test_labels"])
    return paths


def add_parity_task(ds: Dataset) -> Dataset:
    """Two-task labels: (class, class parity). Used for task-level forgetting."""
    y = ds.labels(0)
    return Dataset(ds.x, np.stack([y, y % 2], axis=1))


# ---------------------------------------------------------------------------
# bundle persistence (npz + provenance json)


def save_bundle(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out / "bundle.npz",
        train_x=bundle.train.x.astype(np.float32),
        train_y=bundle.train.y,
        test_x=bundle.test.x.astype(np.float32),
        test_y=bundle.test.y,
        num_classes=np.asarray(bundle.num_classes),
    )
    (out / "provenance.json").write_text(json.dumps(bundle.provenance, indent=2, sort_keys=True))
    return out / "bundle.npz"


def load_bundle(path: str | Path) -> DatasetBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.npz"
    with np.load(path) as z:
        bundle = DatasetBundle(
            Dataset(z["train_x"].astype(np.float64), z["train_y"]),
            Dataset(z["test_x"].astype(np.float64), z["test_y"]),
            tuple(int(c) for c in z["num_classes"]),
        )
    prov = path.parent / "provenance.json"
    if prov.exists():
        bundle.provenance = json.loads(prov.read_text())
    return bundle


def _check_bundle(bundle: DatasetBundle) -> DatasetBundle:
    for split in (bundle.train, bundle.test):
        if split.x.size and (split.x.min() < 0 or split.x.max() > 1):
            raise ValueError("inputs must be normalised to [0, 1]")
        for t in range(split.num_tasks):
            labels = split.labels(t)
            if labels.size and (labels.min() < 0 or labels.max() >= bundle.num_classes[t]):
                raise ValueError(f"task {t} labels outside [0, {bundle.num_classes[t]})")
    return bundle


def bundle_from_idx(
    train_images: str | Path,
    train_labels: str | Path,
    test_images: str | Path,
    test_labels: str | Path,
    classes: Optional[Sequence[int]] = None,
    per_class: Optional[int] = None,
    seed: int = 0,
) -> DatasetBundle:
    train = read_idx_pair(train_images, train_labels)
    test = read_idx_pair(test_images, test_labels)
    if classes is not None:
        train = select_classes(train, classes, per_class, seed)
        test = select_classes(test, classes, None, seed)
        num_classes = len(classes)
    else:
        num_classes = int(max(train.y.max(), test.y.max())) + 1
    prov = {
        "source": "idx",
        "files": [str(p) for p in (train_images, train_labels, test_images, test_labels)],
        "classes": list(classes) if classes is not None else None,
        "per_class": per_class,
        "seed": seed,
    }
    return _check_bundle(DatasetBundle(train, test, (num_classes,), prov))


def bundle_from_blobs(
    num_classes: int = 4, n: int = 6000, dim: int = 784, spread: float = 0.15, test_fraction: float = 0.2, seed: int = 0
) -> DatasetBundle:
    ds = make_blobs(num_classes, n, dim, spread, seed)
    train, test = train_test_split(ds, test_fraction, seed)
    prov = {"source": "blobs", "num_classes": num_classes, "n": n, "dim": dim, "spread": spread, "seed": seed}
    return _check_bundle(DatasetBundle(train, test, (num_classes,), prov))
