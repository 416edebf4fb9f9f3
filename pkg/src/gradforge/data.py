"""Datasets: CIFAR binary files, synthetic images, splits and minibatches."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

CIFAR_HW = 32
CIFAR_PIXELS = CIFAR_HW * CIFAR_HW * 3
CIFAR_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
CIFAR_CLASSES = {"cifar10": 10, "cifar100": 100}
CIFAR_FILES = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}


class CifarFormatError(ValueError):
    def __init__(self, path, message, record: Optional[int] = None):
        self.path = str(path)
        self.record = record
        where = f"{path}" if record is None else f"{path} record {record}"
        super().__init__(f"{where}: {message}")


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C] float64 in [0, 1]
    labels: np.ndarray  # [N] int64 in [0, K)
    num_classes: int
    name: str = ""
    coarse_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def hw(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       name or self.name, coarse)


# ---------------------------------------------------------------------- CIFAR


def _record_size(variant: str) -> int:
    if variant not in CIFAR_LABEL_BYTES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    return CIFAR_LABEL_BYTES[variant] + CIFAR_PIXELS


def load_cifar_file(path, variant: str = "cifar10") -> Dataset:
    """Parse one CIFAR binary batch file into HWC images scaled to [0, 1]."""
    rec = _record_size(variant)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CifarFormatError(path, f"unreadable ({exc.strerror})") from exc
    if len(raw) == 0 or len(raw) % rec:
        raise CifarFormatError(path, f"size {len(raw)} is not a positive multiple of {rec}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    nlab = CIFAR_LABEL_BYTES[variant]
    k = CIFAR_CLASSES[variant]
    labels = arr[:, nlab - 1].astype(np.int64)  # cifar100: [coarse, fine]
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise CifarFormatError(path, f"label {labels[bad[0]]} >= {k}", record=int(bad[0]))
    coarse = arr[:, 0].astype(np.int64) if nlab == 2 else None
    planes = arr[:, nlab:].reshape(-1, 3, CIFAR_HW, CIFAR_HW).transpose(0, 2, 3, 1)
    return Dataset(planes / 255.0, labels, k, Path(path).name, coarse)


def write_cifar_file(ds: Dataset, path, variant: str = "cifar10") -> None:
    """Serialize ``ds`` (32x32x3) in CIFAR binary layout."""
    _record_size(variant)
    if ds.images.shape[1:] != (CIFAR_HW, CIFAR_HW, 3):
        raise ValueError(f"CIFAR layout needs 32x32x3 images, got {ds.images.shape[1:]}")
    pix = np.rint(ds.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(ds), -1)
    lab = ds.labels.astype(np.uint8)[:, None]
    if variant == "cifar100":
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(len(ds), np.int64)
        lab = np.concatenate([coarse.astype(np.uint8)[:, None], lab], axis=1)
    Path(path).write_bytes(np.concatenate([lab, pix], axis=1).tobytes())


def load_cifar(data_dir, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Load the train (50k) or test (10k) portion from a CIFAR binary directory."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"CIFAR data directory {data_dir} does not exist")
    names = CIFAR_FILES[variant][split]
    parts = [load_cifar_file(_find(data_dir, n), variant) for n in names]
    coarse = None
    if variant == "cifar100":
        coarse = np.concatenate([p.coarse_labels for p in parts])
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   CIFAR_CLASSES[variant], f"{variant}-{split}", coarse)


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, *root.glob(f"*/{name}")):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"{name} not found under {root}")


# ---------------------------------------------------------------------- utils


def downsample(ds: Dataset, factor: int = 2) -> Dataset:
    """Average-pool images by ``factor`` along both spatial axes."""
    n, h, w, c = ds.images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by {factor}")
    imgs = ds.images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))
    return Dataset(imgs, ds.labels, ds.num_classes, ds.name, ds.coarse_labels)


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    seed: int = 0


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    if spec.n_train < 0 or spec.n_val < 0 or spec.n_train + spec.n_val > len(ds):
        raise ValueError(f"split {spec.n_train}+{spec.n_val} exceeds {len(ds)} examples")
    perm = np.random.default_rng([spec.seed, 7]).permutation(len(ds))
    tr = perm[:spec.n_train]
    va = perm[spec.n_train:spec.n_train + spec.n_val]
    return ds.subset(tr, f"{ds.name}/train"), ds.subset(va, f"{ds.name}/val")


def minibatches(ds: Dataset, m: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch, shuffled by (seed, epoch); last batch may be short."""
    n = len(ds)
    if not 1 <= m <= n:
        raise ValueError(f"batch size {m} not in [1, {n}]")
    perm = np.random.default_rng([seed, epoch, 11]).permutation(n)
    return [perm[i:i + m] for i in range(0, n, m)]


def batch_stream(ds: Dataset, m: int, seed: int) -> Iterator[np.ndarray]:
    """Endless sequence of minibatches, reshuffled every pass."""
    epoch = 0
    while True:
        yield from minibatches(ds, m, seed, epoch)
        epoch += 1


# ------------------------------------------------------------------ synthetic


SYNTH_KINDS = ("gaussian_blobs", "ring")


def class_templates(kind: str, hw: int, channels: int, K: int, seed: int) -> np.ndarray:
    """Noise-free per-class images, shape [K, hw, hw, channels], in [0, 1]."""
    rng = np.random.default_rng([seed, 101])
    yy, xx = np.mgrid[0:hw, 0:hw] / max(hw - 1, 1)
    out = np.empty((K, hw, hw, channels))
    for k in range(K):
        if kind == "gaussian_blobs":
            img = np.zeros((hw, hw, channels))
            for _ in range(3):
                cy, cx = rng.uniform(0.15, 0.85, size=2)
                sigma = rng.uniform(0.08, 0.2)
                color = rng.uniform(-1.0, 1.0, size=channels)
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
                img += bump[:, :, None] * color
            out[k] = 0.5 + 0.35 * img / max(np.abs(img).max(), 1e-12)
        elif kind == "ring":
            r0 = 0.12 + 0.3 * (k + 0.5) / K
            r = np.hypot(yy - 0.5, xx - 0.5)
            band = np.exp(-((r - r0) ** 2) / (2 * 0.04 ** 2))
            color = rng.uniform(0.3, 1.0, size=channels)
            out[k] = 0.15 + 0.7 * band[:, :, None] * color
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    return np.clip(out, 0.0, 1.0)


def synth_dataset(kind: str, n: int, hw: int, channels: int, K: int, noise: float,
                  seed: int, template_seed: Optional[int] = None, jitter: int = 0) -> Dataset:
    """Class templates plus i.i.d. Gaussian pixel noise, clipped to [0, 1].

    Classes are balanced (counts differ by at most one). ``template_seed``
    fixes the class templates independently of the noise draw, so several
    datasets can share one underlying task. ``jitter`` > 0 cyclically shifts
    each template by up to that many pixels along both axes.
    """
    if n < K:
        raise ValueError(f"need n >= K ({n} < {K})")
    templates = class_templates(kind, hw, channels, K, seed if template_seed is None else template_seed)
    rng = np.random.default_rng([seed, 202])
    labels = rng.permutation(np.arange(n) % K)
    imgs = templates[labels]
    if jitter > 0:
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        imgs = np.stack([np.roll(im, tuple(s), axis=(0, 1)) for im, s in zip(imgs, shifts)])
    imgs = imgs + noise * rng.standard_normal((n, hw, hw, channels))
    return Dataset(np.clip(imgs, 0.0, 1.0), labels, K, f"synth-{kind}")
