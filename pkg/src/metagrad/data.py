"""Datasets: procedural synthetic images, CIFAR-10 binary batches, and
the evaluation-set filtering contract.

Everything stays in the 0-255 pixel domain.  Images are generated or
stored as bytes and promoted to float32, so benign anchors are exactly
representable and clipping arithmetic stays exact for integer budgets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .validation import check_images

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073  # label byte + 32*32*3 pixel bytes
CIFAR_SIDE = 32


@dataclass
class EvalDataset:
    """A batch of evaluation images with labels and optional attack targets."""

    images: np.ndarray  # float32 [N,C,H,W] in 0-255
    labels: np.ndarray  # int64 [N]
    source: str
    target_labels: np.ndarray | None = None
    excluded_count: int = 0

    def __post_init__(self):
        self.images = check_images(self.images, name="images")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetFormatError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.images.shape[0]} images"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "EvalDataset":
        indices = np.asarray(indices)
        return EvalDataset(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            source=self.source,
            target_labels=(
                None
                if self.target_labels is None
                else self.target_labels[indices].copy()
            ),
            excluded_count=self.excluded_count,
        )

    def with_targets(self, seed: int, n_classes: int) -> "EvalDataset":
        """Attach targeted-attack labels drawn uniformly from the
        non-true classes under the given seed."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A17]))
        offsets = rng.integers(1, n_classes, size=len(self))
        targets = (self.labels + offsets) % n_classes
        return EvalDataset(
            images=self.images,
            labels=self.labels,
            source=self.source,
            target_labels=targets.astype(np.int64),
            excluded_count=self.excluded_count,
        )


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

_SHAPE_NAMES = [
    "square", "ring", "disk", "circle", "hbars",
    "vbars", "diag", "antidiag", "cross", "xshape",
]


def _shape_mask(kind: int, cy: int, cx: int, s: int, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    dy, dx = yy - cy, xx - cx
    box = (np.abs(dy) <= s) & (np.abs(dx) <= s)
    r2 = dy * dy + dx * dx
    if kind == 0:
        return box
    if kind == 1:
        return box & ~((np.abs(dy) <= s - 2) & (np.abs(dx) <= s - 2))
    if kind == 2:
        return r2 <= s * s
    if kind == 3:
        return (r2 <= s * s) & (r2 > (s - 2) * (s - 2))
    if kind == 4:
        return box & (dy % 4 <= 1)
    if kind == 5:
        return box & (dx % 4 <= 1)
    if kind == 6:
        return box & (np.abs(dy - dx) <= 1)
    if kind == 7:
        return box & (np.abs(dy + dx) <= 1)
    if kind == 8:
        return (np.abs(dy) <= 1) & box | (np.abs(dx) <= 1) & box
    if kind == 9:
        return box & ((np.abs(dy - dx) <= 1) | (np.abs(dy + dx) <= 1))
    raise ValueError(f"unknown shape kind {kind}")


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    # Exact balance up to +-1: lay out class ids round-robin, then shuffle.
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def make_synthetic(
    seed: int,
    count: int,
    classes: int = 10,
    side: int = 16,
    train_count: int | None = None,
    noise_low: int = 80,
    noise_high: int = 177,
    contrast_low: int = 18,
    contrast_high: int = 46,
):
    """Low-contrast geometric shapes on noise backgrounds: (train, eval).

    The class is the shape geometry; the shape region is brightened by a
    small per-channel offset over a wide-range noise background, so the
    per-pixel evidence is weak and models must pool it.  That keeps
    decision margins small enough for pixel-budget attacks to matter
    while staying comfortably learnable.

    Deterministic under `seed`; class balance is exact to +-1 in each
    split.  Pixels are integers in [noise_low, noise_high-1+contrast_high],
    which stays interior to [0,255] at the defaults, so anchors never sit
    on the pixel bounds and budget arithmetic is exact.
    """
    if classes < 2 or classes > len(_SHAPE_NAMES):
        raise ValueError(
            f"classes must be in [2,{len(_SHAPE_NAMES)}], got {classes}"
        )
    if train_count is None:
        train_count = 10 * count
    rng = np.random.default_rng(np.random.SeedSequence([seed]))

    def draw_split(n: int, tag: str) -> EvalDataset:
        labels = _balanced_labels(n, classes, rng)
        images = rng.integers(
            noise_low, noise_high, size=(n, 3, side, side)
        ).astype(np.uint8)
        centers = rng.integers(6, side - 6 + 1, size=(n, 2))
        sizes = rng.integers(4, 7, size=n)
        shifts = rng.integers(contrast_low, contrast_high + 1, size=(n, 3))
        for i in range(n):
            mask = _shape_mask(
                int(labels[i]), int(centers[i, 0]), int(centers[i, 1]),
                int(sizes[i]), side,
            )
            for c in range(3):
                plane = images[i, c]
                lifted = plane[mask].astype(np.int16) + int(shifts[i, c])
                plane[mask] = np.minimum(lifted, 255).astype(np.uint8)
        return EvalDataset(
            images=images.astype(np.float32),
            labels=labels,
            source=f"synthetic(seed={seed},{tag})",
        )

    train = draw_split(train_count, "train")
    evaluation = draw_split(count, "eval")
    return train, evaluation


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------


def _read_cifar_file(path: Path):
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DatasetFormatError(
            f"{path} does not decode as CIFAR-10 records: {len(raw)} bytes is "
            f"not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(
            f"{path} holds label byte {labels.max()} outside [0,9]"
        )
    # Row-major planes: R first, then G, then B.
    images = (
        records[:, 1:]
        .reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        .astype(np.float32)
    )
    return images, labels


def load_cifar10_subset(path, count: int, seed: int) -> EvalDataset:
    """Seeded subsample of the CIFAR-10 binary test batch.

    `path` may point at the test batch file itself or a directory
    containing `test_batch.bin`.  The white-box filtering required of
    evaluation sets happens later, against a concrete zoo.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "test_batch.bin"
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    images, labels = _read_cifar_file(path)
    if count > len(labels):
        raise ValueError(
            f"requested {count} images but {path} holds {len(labels)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    indices = np.sort(rng.permutation(len(labels))[:count])
    return EvalDataset(
        images=images[indices],
        labels=labels[indices],
        source="cifar10-subset",
    )


# ---------------------------------------------------------------------------
# evaluation-set filtering
# ---------------------------------------------------------------------------


def filter_correct(dataset: EvalDataset, zoo, roles: str = "white") -> EvalDataset:
    """Keep only images the zoo members classify correctly.

    `roles` selects the consensus set: "white" (the classic protocol:
    attack rates start from images the attacked models get right) or
    "all" (black-box members too, which makes the zero-budget success
    rate exactly zero on every reported row).  The excluded count is
    logged and recorded on the returned dataset; downstream success
    rates assume this invariant holds.
    """
    if roles not in ("white", "all"):
        raise ConfigError(f"roles must be 'white' or 'all', got {roles!r}")
    members = zoo.white_models if roles == "white" else zoo.models
    keep = np.ones(len(dataset), dtype=bool)
    for model in members:
        keep &= model.predict(dataset.images) == dataset.labels
    excluded = int((~keep).sum())
    if excluded:
        logger.info(
            "filtered %d/%d images misclassified by white-box members",
            excluded, len(dataset),
        )
    filtered = dataset.subset(np.nonzero(keep)[0])
    filtered.excluded_count = excluded
    return filtered
