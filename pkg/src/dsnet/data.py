"""Datasets: a synthetic easy/hard mixture generator and a loader for the
channel-planar CIFAR binary format (1 label byte + 3072 pixel bytes per
record).  The synthetic generator can emit the same on-disk format so both
paths share one loader.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import Tensor, UsageError

__all__ = [
    "MixtureConfig",
    "Dataset",
    "FormatError",
    "gen_synthetic",
    "load_cifar_binary",
    "write_cifar_binary",
    "batches",
]

EASY, HARD = 0, 1


class FormatError(ValueError):
    pass


@dataclass
class MixtureConfig:
    """Easy samples: bright, high-SNR class prototypes (a linear probe
    solves them).  Hard samples: dim prototypes with a random sign flip and
    heavy noise, so class identity is a nonlinear feature that rewards
    network capacity."""

    n_classes: int = 4
    n_train: int = 2048
    n_test: int = 512
    image_size: int = 12
    easy_fraction: float = 0.5
    easy_sep: float = 1.0
    hard_sep: float = 0.45
    easy_noise: float = 0.1
    hard_noise: float = 0.35
    easy_shift: float = 0.3
    flip_hard: bool = True
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise UsageError("need at least 2 classes")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise UsageError("easy_fraction must lie in [0, 1]")
        if self.easy_sep <= 0 or self.hard_sep <= 0:
            raise UsageError("cluster separations must be positive")
        if self.image_size < 4:
            raise UsageError("image_size must be at least 4")


@dataclass
class Dataset:
    images: np.ndarray          # float32 [N, 3, S, S]
    labels: np.ndarray          # int64 [N]
    tags: np.ndarray | None     # int8 [N], 0 easy / 1 hard; analysis only
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def _prototypes(cfg: MixtureConfig, rng: np.random.Generator) -> np.ndarray:
    protos = rng.normal(size=(cfg.n_classes, 3, cfg.image_size, cfg.image_size))
    protos = uniform_filter(protos, size=(1, 1, 3, 3), mode="wrap")
    rms = np.sqrt((protos**2).mean(axis=(1, 2, 3), keepdims=True))
    return (protos / rms).astype(np.float32)


def gen_synthetic(cfg: MixtureConfig, split: str = "train") -> Dataset:
    """Deterministic under (cfg.seed, split); tags are recorded for
    analysis and never fed to a model."""
    cfg.validate()
    if split not in ("train", "test"):
        raise UsageError(f"unknown split {split!r}")
    ss = np.random.SeedSequence(cfg.seed)
    proto_seed, train_seed, test_seed = ss.spawn(3)
    protos = _prototypes(cfg, np.random.default_rng(proto_seed))
    rng = np.random.default_rng(train_seed if split == "train" else test_seed)
    n = cfg.n_train if split == "train" else cfg.n_test

    labels = rng.integers(0, cfg.n_classes, size=n)
    is_hard = rng.random(n) >= cfg.easy_fraction
    amp = rng.uniform(0.8, 1.2, size=n).astype(np.float32)
    flip = np.where(rng.random(n) < 0.5, -1.0, 1.0).astype(np.float32)
    noise = rng.normal(size=(n, 3, cfg.image_size, cfg.image_size)).astype(
        np.float32)

    images = np.empty((n, 3, cfg.image_size, cfg.image_size), dtype=np.float32)
    for i in range(n):
        p = protos[labels[i]]
        if is_hard[i]:
            sign = flip[i] if cfg.flip_hard else 1.0
            images[i] = cfg.hard_sep * sign * amp[i] * p \
                + cfg.hard_noise * noise[i]
        else:
            images[i] = cfg.easy_shift + cfg.easy_sep * amp[i] * p \
                + cfg.easy_noise * noise[i]
    return Dataset(
        images=images,
        labels=labels.astype(np.int64),
        tags=is_hard.astype(np.int8),
        meta={"source": "synthetic", "seed": cfg.seed, "split": split,
              "n_classes": cfg.n_classes},
    )


# ----------------------------------------------------------------------
# CIFAR binary format
# ----------------------------------------------------------------------
_REC_PIXELS = 3072
_REC_BYTES = 1 + _REC_PIXELS


def load_cifar_binary(path, image_size: int = 32,
                      standardize: bool = True) -> Dataset:
    """Records of 1 label byte + channel-planar pixel bytes; pixels are
    scaled to [0, 1] and optionally standardized per channel, with the
    constants recorded in the metadata."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    rec = 1 + 3 * image_size * image_size
    if raw.size == 0 or raw.size % rec != 0:
        raise FormatError(
            f"{path}: truncated record at offset {raw.size - raw.size % rec} "
            f"(record size {rec} bytes)"
        )
    recs = raw.reshape(-1, rec)
    labels = recs[:, 0].astype(np.int64)
    images = recs[:, 1:].reshape(-1, 3, image_size, image_size)
    images = images.astype(np.float32) / 255.0
    meta = {"source": str(path), "scale": 255.0}
    if standardize:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3)) + 1e-8
        images = (images - mean[None, :, None, None]) / std[None, :, None, None]
        meta["channel_mean"] = mean.tolist()
        meta["channel_std"] = std.tolist()
    return Dataset(images=images, labels=labels, tags=None, meta=meta)


def write_cifar_binary(ds: Dataset, path, lo: float = -2.0, hi: float = 2.0):
    """Quantize images into the channel-planar byte format (values are
    clipped to [lo, hi] and mapped to 0..255)."""
    n = len(ds)
    size = ds.images.shape[-1]
    out = np.empty((n, 1 + 3 * size * size), dtype=np.uint8)
    out[:, 0] = ds.labels.astype(np.uint8)
    q = np.clip((ds.images - lo) / (hi - lo), 0.0, 1.0)
    out[:, 1:] = np.round(q.reshape(n, -1) * 255).astype(np.uint8)
    Path(path).write_bytes(out.tobytes())


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
            include_tags: bool = False):
    """Minibatch iterator; shuffles when an rng is given."""
    idx = np.arange(len(ds))
    if rng is not None:
        rng.shuffle(idx)
    for start in range(0, len(idx), batch_size):
        sel = idx[start : start + batch_size]
        x = Tensor(ds.images[sel], dtype=None)
        if include_tags:
            yield x, ds.labels[sel], (ds.tags[sel] if ds.tags is not None else None)
        else:
            yield x, ds.labels[sel]
