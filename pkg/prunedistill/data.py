"""Labeled image datasets: IDX and CIFAR binary readers, synthetic blobs, splits."""
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from prunedistill.errors import (
    ConfigError,
    CountMismatchError,
    DataError,
    IdxMagicError,
    MissingDataError,
    RecordSizeError,
    TruncatedFileError,
)
from prunedistill.tensor import get_dtype, round_half_away

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_VARIANTS = {
    # record layout: label bytes then pixels; classes per label mode
    "cifar10": {"label_bytes": 1, "classes": {"fine": 10}},
    "cifar100": {"label_bytes": 2, "classes": {"coarse": 20, "fine": 100}},
}

VAL_FRACTION = 0.1
SYNTHETIC_MEAN = 0.5
SYNTHETIC_STD = 0.5
TEMPLATE_GRID = 4
CROP_PAD = 4

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict = field(default_factory=dict)
    mean: tuple | None = None
    std: tuple | None = None
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {self.images.shape} images for {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")
        seen = np.zeros(len(self.labels), dtype=bool)
        for split, idx in self.splits.items():
            if split not in SPLITS:
                raise DataError(f"unknown split {split!r}")
            if seen[idx].any():
                raise DataError(f"{self.name}: split {split!r} overlaps another split")
            seen[idx] = True

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return self.splits.get(split, np.zeros(0, dtype=np.int64))

    def size(self, split: str) -> int:
        return int(len(self.indices(split)))

    def split(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]


def _dataset(images, labels, num_classes, name) -> LabeledDataset:
    images = np.ascontiguousarray(images, dtype=get_dtype())
    if not np.isfinite(images).all():
        raise DataError(f"{name}: non-finite pixel values")
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(images, labels, num_classes, {"train": np.arange(len(labels))}, name=name)


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"data file not found: {path}")
    return path.read_bytes()


# --- IDX -------------------------------------------------------------------


def _idx_header(blob: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise TruncatedFileError(f"{path}: expected at least {head} header bytes, got {len(blob)}")
    found = int.from_bytes(blob[:4], "big")
    if found != magic:
        raise IdxMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    dims = tuple(int(d) for d in np.frombuffer(blob, dtype=">u4", count=ndim, offset=4))
    expected = head + int(np.prod(dims))
    if len(blob) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return dims


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """MNIST-style IDX pair; pixels scaled to [0, 1], one channel."""
    img_blob = _read(images_path)
    lbl_blob = _read(labels_path)
    n, rows, cols = _idx_header(img_blob, IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,) = _idx_header(lbl_blob, IDX_LABELS_MAGIC, 1, labels_path)
    if n != n_labels:
        raise CountMismatchError(f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=8)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 1)
    log.debug("read %d idx images of %dx%d from %s", n, rows, cols, images_path)
    return _dataset(pixels / 255.0, labels, k, Path(images_path).stem)


# --- CIFAR -----------------------------------------------------------------


def load_cifar_binary(paths, label_mode: str = "fine", variant: str = "cifar100") -> LabeledDataset:
    """CIFAR-10/100 binary batches, concatenated in the order given."""
    if variant not in CIFAR_VARIANTS:
        raise ConfigError(f"unknown CIFAR variant {variant!r}, expected one of {sorted(CIFAR_VARIANTS)}")
    layout = CIFAR_VARIANTS[variant]
    if label_mode not in layout["classes"]:
        raise ConfigError(f"{variant} has no {label_mode!r} labels")
    label_bytes = layout["label_bytes"]
    record = label_bytes + CIFAR_PIXELS
    # the fine label is the last label byte of a record
    label_at = 0 if label_mode == "coarse" else label_bytes - 1
    images, labels = [], []
    for path in [paths] if isinstance(paths, (str, Path)) else paths:
        blob = _read(path)
        if len(blob) % record:
            raise RecordSizeError(f"{path}: {len(blob)} bytes is not a multiple of the {record}-byte {variant} record")
        rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_at])
        images.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))
    if not images:
        raise MissingDataError("no CIFAR files given")
    return _dataset(np.concatenate(images) / 255.0, np.concatenate(labels), layout["classes"][label_mode], variant)


# --- synthetic -------------------------------------------------------------


def synthetic_blobs(
    classes: int,
    channels: int,
    height: int,
    width: int,
    per_class: int,
    noise_std: float,
    seed: int,
    grid: int = TEMPLATE_GRID,
) -> LabeledDataset:
    """One smooth template per class plus Gaussian pixel noise.

    Templates are random ``grid x grid`` patterns upsampled with a cubic
    spline, so the classes differ in low-frequency structure only.
    """
    if min(classes, channels, height, width, per_class, grid) < 1:
        raise ConfigError("synthetic dataset sizes must be positive")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1.0, 1.0, size=(classes, channels, grid, grid))
    templates = zoom(coarse, (1, 1, height / grid, width / grid), order=3, mode="nearest", grid_mode=True)
    templates = templates[:, :, :height, :width]
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    templates = SYNTHETIC_MEAN + 0.25 * templates

    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels] + rng.normal(0.0, noise_std, size=(len(labels), channels, height, width))
    return _dataset(images, labels, classes, f"blobs{classes}")


# --- splits and normalization ----------------------------------------------


def merge_test(train_ds: LabeledDataset, test_ds: LabeledDataset) -> LabeledDataset:
    """Append ``test_ds`` to ``train_ds`` as the test split."""
    if train_ds.sample_shape != test_ds.sample_shape or train_ds.num_classes != test_ds.num_classes:
        raise DataError(
            f"test set {test_ds.sample_shape}/{test_ds.num_classes} classes does not match "
            f"{train_ds.sample_shape}/{train_ds.num_classes}"
        )
    n = len(train_ds.labels)
    splits = dict(train_ds.splits)
    splits["test"] = np.arange(n, n + len(test_ds.labels))
    return replace(
        train_ds,
        images=np.concatenate([train_ds.images, test_ds.images]),
        labels=np.concatenate([train_ds.labels, test_ds.labels]),
        splits=splits,
    )


def split_train_val(ds: LabeledDataset, val_fraction: float = VAL_FRACTION, seed: int = 0) -> LabeledDataset:
    """Seeded permutation of the train (and any previous val) samples; the tail goes to val."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    pool = np.sort(np.concatenate([ds.indices("train"), ds.indices("val")]))
    perm = np.random.default_rng(seed).permutation(pool)
    n_val = round_half_away(val_fraction * len(pool))
    splits = dict(ds.splits)
    splits["train"] = np.sort(perm[: len(pool) - n_val])
    splits["val"] = np.sort(perm[len(pool) - n_val :])
    return replace(ds, splits=splits)


def _channel_stats(values, channels: int, what: str) -> np.ndarray:
    arr = np.ravel(np.asarray(values, dtype=np.float64))
    if arr.size not in (1, channels):
        raise ConfigError(f"{what} needs 1 or {channels} values, got {arr.size}")
    return np.broadcast_to(arr, (channels,)).reshape(1, channels, 1, 1)


def normalize(ds: LabeledDataset, mean, std) -> LabeledDataset:
    """x' = (x - mean) / std per channel; the stats are kept for ``denormalize``."""
    c = ds.sample_shape[0]
    m = _channel_stats(mean, c, "mean")
    s = _channel_stats(std, c, "std")
    if (s <= 0).any():
        raise DataError(f"normalization std must be positive, got {np.ravel(std).tolist()}")
    images = ((ds.images - m) / s).astype(ds.images.dtype)
    return replace(ds, images=images, mean=tuple(m.ravel().tolist()), std=tuple(s.ravel().tolist()))


def denormalize(ds: LabeledDataset) -> LabeledDataset:
    if ds.mean is None:
        return ds
    m = np.asarray(ds.mean).reshape(1, -1, 1, 1)
    s = np.asarray(ds.std).reshape(1, -1, 1, 1)
    return replace(ds, images=(ds.images * s + m).astype(ds.images.dtype), mean=None, std=None)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = CROP_PAD) -> np.ndarray:
    """Zero-pad by ``pad``, random crop back to size, horizontal flip with p = 0.5."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# --- config-driven loading -------------------------------------------------

DATA_KINDS = ("synthetic", "idx", "cifar")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    # synthetic
    classes: int = 10
    channels: int = 3
    height: int = 16
    width: int = 16
    per_class: int = 100
    test_per_class: int = 20
    noise_std: float = 0.3
    data_seed: int = 1234
    # file-backed
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: tuple = ()
    test_files: tuple = ()
    variant: str = "cifar100"
    label_mode: str = "fine"
    # shared
    val_fraction: float = VAL_FRACTION
    mean: tuple = (SYNTHETIC_MEAN,)
    std: tuple = (SYNTHETIC_STD,)

    def check_valid(self) -> None:
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"unknown data kind {self.kind!r}, expected one of {DATA_KINDS}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.kind == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("idx data needs train_images and train_labels")
        if self.kind == "cifar" and not self.train_files:
            raise ConfigError("cifar data needs train_files")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("train_files", "test_files", "mean", "std"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.check_valid()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("train_files", "test_files", "mean", "std"):
            d[key] = list(d[key])
        return d


def load_dataset(cfg: DataConfig, split_seed: int = 0) -> LabeledDataset:
    """Build the dataset a config describes, normalized and split into train/val/test."""
    cfg.check_valid()
    if cfg.kind == "synthetic":
        per = cfg.per_class + cfg.test_per_class
        ds = synthetic_blobs(cfg.classes, cfg.channels, cfg.height, cfg.width, per, cfg.noise_std, cfg.data_seed)
        position = np.arange(len(ds.labels)) % per
        splits = {"train": np.flatnonzero(position < cfg.per_class)}
        if cfg.test_per_class:
            splits["test"] = np.flatnonzero(position >= cfg.per_class)
        ds = replace(ds, splits=splits)
    elif cfg.kind == "idx":
        ds = load_idx(cfg.train_images, cfg.train_labels)
        if cfg.test_images:
            test = load_idx(cfg.test_images, cfg.test_labels, num_classes=ds.num_classes)
            ds = merge_test(ds, test)
    else:
        ds = load_cifar_binary(cfg.train_files, cfg.label_mode, cfg.variant)
        if cfg.test_files:
            ds = merge_test(ds, load_cifar_binary(cfg.test_files, cfg.label_mode, cfg.variant))
    ds = normalize(ds, cfg.mean, cfg.std)
    ds = split_train_val(ds, cfg.val_fraction, split_seed)
    log.info(
        "%s: %d train / %d val / %d test samples, %d classes, shape %s",
        ds.name,
        ds.size("train"),
        ds.size("val"),
        ds.size("test"),
        ds.num_classes,
        ds.sample_shape,
    )
    return ds
