"""Datasets: IDX files, synthetic Gaussian mixtures and scoring-batch sampling."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# IDX type code -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("="): code for code, dt in _IDX_TYPES.items()}


class IDXError(ValueError):
    pass


class MagicMismatch(IDXError):
    pass


class TruncatedFile(IDXError):
    pass


class CountMismatch(IDXError):
    pass


class ClassDeficit(ValueError):
    pass


def fingerprint_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(f"{a.dtype.str}{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"
    fingerprint: str = ""
    stats: tuple | None = None  # per-channel (mean, std) used to standardize

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split == "train":
            missing = sorted(set(range(self.num_classes)) - set(np.unique(self.labels).tolist()))
            if missing:
                raise ValueError(f"train split has no examples of classes {missing}")
        if not self.fingerprint:
            self.fingerprint = fingerprint_arrays(self.images, self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, split: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices], self.labels[indices], self.num_classes, split or f"{self.split}-subset",
            stats=self.stats,
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``Batch`` objects; shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(self), batch_size):
            idx = order[lo : lo + batch_size]
            yield Batch(self.images[idx], self.labels[idx], idx)

    def save(self, path):
        meta = {"num_classes": self.num_classes, "split": self.split, "fingerprint": self.fingerprint}
        if self.stats is not None:
            meta["stats"] = [list(map(float, s)) for s in self.stats]
        entries = [{"name": "images", "array": self.images}, {"name": "labels", "array": self.labels, "dtype": "<i8"}]
        return write_container(path, "dataset", entries, meta)

    @classmethod
    def load(cls, path) -> "Dataset":
        header, arrays = read_container(path, kind="dataset")
        meta = header["meta"]
        stats = tuple(np.asarray(s) for s in meta["stats"]) if "stats" in meta else None
        return cls(arrays["images"], arrays["labels"], meta["num_classes"], meta["split"], stats=stats)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = fingerprint_arrays(np.asarray(self.x), np.asarray(self.y))

    def __len__(self) -> int:
        return len(self.y)


# ------------------------------------------------------------------ IDX files


def write_idx(path, array: np.ndarray) -> Path:
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise IDXError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[native]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, code, array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=_IDX_TYPES[code]).tobytes())
    return path


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Read any IDX file into a native-endian array."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: missing magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if expect_magic is not None and magic != expect_magic:
        raise MagicMismatch(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_TYPES:
        raise MagicMismatch(f"{path}: 0x{magic:08x} is not an IDX magic number")
    dtype = _IDX_TYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise TruncatedFile(f"{path}: header declares {ndim} dimensions but file ends early")
    shape = struct.unpack(f">{ndim}I", data[4:hdr])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(data) - hdr < nbytes:
        raise TruncatedFile(f"{path}: expected {nbytes} payload bytes, found {len(data) - hdr}")
    arr = np.frombuffer(data[hdr : hdr + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def load_idx(images_path, labels_path, split: str = "train", stats=None, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (e.g. MNIST).

    Pixels are scaled to [0, 1] and standardized per channel. Pass the train
    split's ``stats`` when loading a test split.
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    if stats is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        stats = (mean, np.where(std > 0, std, 1.0))
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    k = num_classes or int(labels.max()) + 1
    return Dataset(x, labels.astype(np.int64), k, split, stats=(mean, std))


# ------------------------------------------------------------- synthetic data


def simplex_means(k: int, dim: int, separation: float) -> np.ndarray:
    """``k`` points in ``dim`` dimensions with all pairwise distances equal to ``separation``."""
    if dim < k - 1:
        raise ValueError(f"need dim >= k - 1 to place {k} equidistant means, got dim={dim}")
    corners = np.eye(k) * (separation / np.sqrt(2.0))
    centred = corners - corners.mean(axis=0)
    # coordinates in an orthonormal basis of the (k-1)-dim affine hull
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    coords = centred @ vt[: max(k - 1, 0)].T
    out = np.zeros((k, dim))
    out[:, : coords.shape[1]] = coords
    return out


def synthetic_gaussian_mixture(
    k: int,
    n_per_class: int,
    dim: int,
    separation: float,
    seed: int = 0,
    split: str = "train",
    rotate: bool = True,
    image_shape: tuple | None = None,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters with equidistant means.

    The mixture (means and rotation) depends only on ``(k, dim, separation,
    seed)``; ``split`` selects an independent sample stream, so train and test
    splits share the same distribution.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    mix_rng = np.random.default_rng([seed, 0])
    means = simplex_means(k, dim, separation)
    if rotate and dim > 1:
        q, r = np.linalg.qr(mix_rng.normal(size=(dim, dim)))
        means = means @ (q * np.sign(np.diag(r))).T
    split_code = {"train": 1, "test": 2}.get(split, 3 + sum(split.encode()))
    rng = np.random.default_rng([seed, split_code])
    labels = np.repeat(np.arange(k), n_per_class)
    x = means[labels] + rng.normal(size=(k * n_per_class, dim))
    shape = image_shape or (1, 1, dim)
    return Dataset(x.reshape((-1,) + tuple(shape)), labels, k, split)


def load_digits_images(side: int = 28, split: str = "train", n_train: int = 1400, stats=None) -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn, resized to ``side`` x ``side``.

    A small offline stand-in for MNIST: bilinear upsampling, scaling to [0, 1]
    and standardization with the train split's statistics. The first
    ``n_train`` examples form the train split, the rest the test split.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    raw = load_digits()
    images = raw.images / 16.0
    if side != 8:
        images = zoom(images, (1, side / 8, side / 8), order=1)
    x = np.clip(images, 0.0, 1.0)[:, None, :, :]
    labels = raw.target.astype(np.int64)
    if stats is None:
        train = x[:n_train]
        std = train.std(axis=(0, 2, 3))
        stats = (train.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    sl = slice(0, n_train) if split == "train" else slice(n_train, None)
    return Dataset(x[sl], labels[sl], 10, split, stats=(mean, std))


# --------------------------------------------------------------- scoring batch


@dataclass(frozen=True)
class ScoringBatchPolicy:
    per_class: int = 10
    seed: int = 0
    balanced: bool = True


def sample_scoring_batch(dataset: Dataset, policy: ScoringBatchPolicy = ScoringBatchPolicy()) -> Batch:
    """Draw ``per_class * k`` examples without replacement.

    Balanced (default): exactly ``per_class`` from every class. Otherwise a
    uniform draw of the same size.
    """
    k, c = dataset.num_classes, policy.per_class
    rng = np.random.default_rng(policy.seed)
    if policy.balanced:
        picks = []
        for cls in range(k):
            members = np.flatnonzero(dataset.labels == cls)
            if len(members) < c:
                raise ClassDeficit(f"class {cls} has {len(members)} examples, scoring batch needs {c}")
            picks.append(np.sort(rng.choice(members, size=c, replace=False)))
        idx = np.concatenate(picks)
    else:
        if len(dataset) < c * k:
            raise ClassDeficit(f"dataset has {len(dataset)} examples, scoring batch needs {c * k}")
        idx = np.sort(rng.choice(len(dataset), size=c * k, replace=False))
    return Batch(dataset.images[idx], dataset.labels[idx], idx)


def sample_scoring_batches(dataset: Dataset, policy: ScoringBatchPolicy, count: int = 1) -> list[Batch]:
    """``count`` scoring batches; batch ``i`` uses seed ``policy.seed + 1_000_003 * i``."""
    out = []
    for i in range(count):
        sub = ScoringBatchPolicy(policy.per_class, policy.seed + 1_000_003 * i, policy.balanced)
        out.append(sample_scoring_batch(dataset, sub))
    return out
