"""Synthetic Gaussian-mixture data, binary dataset files, IDX ingestion and batching.

The generator draws ``K`` labelled classes plus ``E`` gallery-only classes. The
training set T and validation set V are balanced samples of the labelled
classes; the unlabelled gallery mixes all ``K + E`` classes and carries a small
number of exact copies of V rows so that near-duplicate filtering can be
audited against a known answer.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .rng import stream

DATASET_MAGIC = b"SDLABDS1"
GALLERY_MAGIC = b"SDLABGL1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIII")


class DatasetFileError(ValueError):
    """Base class for unreadable dataset files."""


class BadMagicError(DatasetFileError):
    """File does not start with a known magic string (format error)."""


class TruncatedFileError(DatasetFileError):
    """File ends before the payload announced by its header."""


class UnsupportedVersionError(DatasetFileError):
    """File version is newer or older than this reader understands."""


class CountMismatchError(DatasetFileError):
    """Header counts disagree with the payload, or paired files disagree."""


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per feature row required")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.name == other.name
            and self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )


@dataclass
class UnlabeledGallery:
    features: np.ndarray
    ids: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.ids.shape != (self.features.shape[0],):
            raise ValueError("one id per feature row required")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, ids, name: str | None = None) -> "UnlabeledGallery":
        """Rows whose id is in ``ids``, kept in ascending id order."""
        keep = np.isin(self.ids, np.asarray(list(ids), dtype=np.int64))
        order = np.argsort(self.ids[keep], kind="stable")
        return UnlabeledGallery(
            self.features[keep][order], self.ids[keep][order], self.name if name is None else name
        )

    def equals(self, other: "UnlabeledGallery") -> bool:
        return (
            self.name == other.name
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.ids.tobytes() == other.ids.tobytes()
        )


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    extra_classes: int = 10
    dim: int = 32
    mean_scale: float = 1.0
    noise_std: float = 1.0
    components_per_class: int = 1
    n_train: int = 2000
    n_val: int = 2000
    n_gallery: int = 20000
    duplicate_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        K, E = self.num_classes, self.extra_classes
        if K < 2 or E < 0 or self.dim < 2:
            raise ValueError("need num_classes >= 2, extra_classes >= 0, dim >= 2")
        if min(self.n_train, self.n_val, self.n_gallery) < K:
            raise ValueError("every split must hold at least one sample per class")
        if self.noise_std <= 0 or self.mean_scale <= 0:
            raise ValueError("mean_scale and noise_std must be positive")
        if self.components_per_class < 1:
            raise ValueError("components_per_class must be >= 1")
        if not 0.0 <= self.duplicate_fraction <= 1.0:
            raise ValueError("duplicate_fraction must lie in [0, 1]")


@dataclass
class MixtureOracle:
    """Ground truth of the generator: component means and a shared isotropic std.

    ``means[c, j]`` is the mean of component ``j`` of class ``c``; components are
    equally likely within a class and classes are equally likely.
    """

    means: np.ndarray
    noise_std: float
    num_classes: int
    gallery_classes: np.ndarray = field(repr=False)
    planted_ids: np.ndarray = field(repr=False)
    planted_val_rows: np.ndarray = field(repr=False)

    def class_log_density(self, x: np.ndarray, classes=None) -> np.ndarray:
        """Log density of each row of ``x`` under each class (up to a shared constant)."""
        x = np.asarray(x, dtype=np.float64)
        means = self.means if classes is None else self.means[classes]
        # (n, C, J)
        d2 = ((x[:, None, None, :] - means[None, :, :, :]) ** 2).sum(axis=-1)
        return logsumexp(-0.5 * d2 / self.noise_std**2, axis=2)

    def bayes_predict(self, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Argmax over the labelled classes of the true class density."""
        out = []
        labelled = np.arange(self.num_classes)
        for s in range(0, len(x), chunk):
            out.append(np.argmax(self.class_log_density(x[s : s + chunk], labelled), axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def bayes_accuracy(self, data: LabeledDataset) -> float:
        return float(np.mean(self.bayes_predict(data.features) == data.labels))


def _sample(rng, means, noise_std, classes):
    J = means.shape[1]
    comp = rng.integers(0, J, size=len(classes))
    centers = means[classes, comp]
    return centers + noise_std * rng.standard_normal(centers.shape)


def _balanced_labels(rng, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def generate_synthetic(cfg: SyntheticConfig):
    """Return ``(T, V, gallery, oracle)`` drawn deterministically from ``cfg.seed``."""
    K, E, D = cfg.num_classes, cfg.extra_classes, cfg.dim
    J = cfg.components_per_class
    means = cfg.mean_scale * stream(cfg.seed, "class-means").standard_normal((K + E, J, D))

    rng_t = stream(cfg.seed, "train")
    y_t = _balanced_labels(rng_t, cfg.n_train, K)
    T = LabeledDataset(_sample(rng_t, means, cfg.noise_std, y_t), y_t, K, "train")

    rng_v = stream(cfg.seed, "val")
    y_v = _balanced_labels(rng_v, cfg.n_val, K)
    V = LabeledDataset(_sample(rng_v, means, cfg.noise_std, y_v), y_v, K, "val")

    rng_g = stream(cfg.seed, "gallery")
    y_g = _balanced_labels(rng_g, cfg.n_gallery, K + E)
    x_g = _sample(rng_g, means, cfg.noise_std, y_g)

    n_dup = int(round(cfg.duplicate_fraction * cfg.n_gallery))
    rng_p = stream(cfg.seed, "plant-duplicates")
    planted = np.sort(rng_p.choice(cfg.n_gallery, size=n_dup, replace=False))
    src_rows = rng_p.choice(cfg.n_val, size=n_dup, replace=n_dup > cfg.n_val)
    x_g[planted] = V.features[src_rows]
    y_g = y_g.copy()
    y_g[planted] = V.labels[src_rows]

    gallery = UnlabeledGallery(x_g, np.arange(cfg.n_gallery, dtype=np.int64), "gallery")
    oracle = MixtureOracle(
        means=means,
        noise_std=cfg.noise_std,
        num_classes=K,
        gallery_classes=y_g,
        planted_ids=planted.astype(np.int64),
        planted_val_rows=src_rows.astype(np.int64),
    )
    return T, V, gallery, oracle


# ---------------------------------------------------------------------------
# binary dataset files


def _encode(obj) -> bytes:
    buf = io.BytesIO()
    if isinstance(obj, LabeledDataset):
        n, d = obj.features.shape
        buf.write(_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, n, d, obj.num_classes))
        buf.write(obj.features.astype("<f8").tobytes())
        buf.write(obj.labels.astype("<u4").tobytes())
    elif isinstance(obj, UnlabeledGallery):
        n, d = obj.features.shape
        buf.write(_HEADER.pack(GALLERY_MAGIC, FORMAT_VERSION, n, d, 0))
        buf.write(obj.features.astype("<f8").tobytes())
        buf.write(obj.ids.astype("<i8").tobytes())
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    name = obj.name.encode("utf-8")
    buf.write(struct.pack("<I", len(name)))
    buf.write(name)
    return buf.getvalue()


def dataset_bytes(obj) -> bytes:
    return _encode(obj)


def save_dataset(path, obj) -> None:
    """Write a LabeledDataset or UnlabeledGallery in the little-endian container format.

    Layout: magic (8 bytes), u32 version, u32 n, u32 D, u32 K (0 for galleries),
    n*D f64 features row-major, then n u32 labels or n i64 ids, then a u32
    name length and the UTF-8 name.
    """
    Path(path).write_bytes(_encode(obj))


def _take(data: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(data):
        raise TruncatedFileError(f"truncated file: {what} needs {size} bytes at offset {offset}")
    return data[offset : offset + size], offset + size


def parse_dataset(data: bytes):
    if len(data) < 8:
        raise TruncatedFileError("truncated file: missing magic")
    magic = data[:8]
    if magic not in (DATASET_MAGIC, GALLERY_MAGIC):
        raise BadMagicError(f"format error: unknown magic {magic!r}")
    head, off = _take(data, 0, _HEADER.size, "header")
    _, version, n, d, k = _HEADER.unpack(head)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}")
    raw, off = _take(data, off, 8 * n * d, "features")
    features = np.frombuffer(raw, dtype="<f8").reshape(n, d).astype(np.float64)
    if magic == DATASET_MAGIC:
        raw, off = _take(data, off, 4 * n, "labels")
        tail = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    else:
        raw, off = _take(data, off, 8 * n, "ids")
        tail = np.frombuffer(raw, dtype="<i8").astype(np.int64)
    raw, off = _take(data, off, 4, "name length")
    (name_len,) = struct.unpack("<I", raw)
    raw, off = _take(data, off, name_len, "name")
    if off != len(data):
        raise CountMismatchError(f"{len(data) - off} unexpected trailing bytes")
    name = raw.decode("utf-8")
    try:
        if magic == DATASET_MAGIC:
            return LabeledDataset(features, tail, k, name)
        return UnlabeledGallery(features, tail, name)
    except ValueError as exc:
        raise CountMismatchError(str(exc)) from exc


def load_dataset(path):
    return parse_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# IDX (MNIST container) ingestion

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    hdr_end = 4 + 4 * ndim
    if len(data) < hdr_end:
        raise TruncatedFileError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", data[4:hdr_end])
    size = int(np.prod(dims))
    if len(data) - hdr_end < size:
        raise TruncatedFileError(f"{path}: IDX payload shorter than {size} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=hdr_end).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "idx"):
    """Images scaled to [0, 1] and flattened to ``rows * cols`` features."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    k = num_classes if num_classes is not None else max(2, int(labels.max(initial=0)) + 1)
    return LabeledDataset(feats, labels, k, name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# batching


def batch_iterator(data, batch_size: int, seed: int, epoch_index: int) -> list[np.ndarray]:
    """Index batches covering a seeded permutation of ``range(n)``.

    ``data`` may be a dataset, a gallery or a plain sample count.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = data if isinstance(data, (int, np.integer)) else len(data)
    order = stream(seed, "shuffle", epoch_index).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
