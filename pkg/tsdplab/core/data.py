"""
Synthetic datasets, the four-way membership split and the `.tsds` format.

Images are class templates plus Gaussian noise and a random integer shift,
clipped to [0, 1]. Templates depend only on (distribution, template_seed), so
train and test sets generated with different seeds share their classes.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- gen_synthetic(n_classes, n_per_class, side, seed, ...): Class-conditional images
- class_templates(n_classes, side, channels, distribution, template_seed): Template bank
- make_mia_split(d, seed): Stratified, disjoint quarters
- make_attacker_queryset(d_public, budget, seed): Label-stripped uniform sample
- subset(d, idx): Dataset restricted to the given positions
- concat_datasets(a, b): Concatenation of two datasets of the same task
- save_dataset(d, path) / load_dataset(path): `.tsds` container round trip

DATA CLASSES:
-------------
- Dataset: images, labels and provenance
- MiaSplit: target/shadow train/test quarters
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from tsdplab.core.container import KIND_DATASET, read_container, write_container
from tsdplab.utils.logging import TSDPValidationError, logger
from tsdplab.utils.rng import make_rng

DISTRIBUTIONS = ("public", "private")
DATASET_SUFFIX = ".tsds"


@dataclass
class Dataset:
    """Images (n, c, h, w) in [0, 1] with optional labels."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    n_classes: int
    seed: int = 0
    distribution: str = "public"
    sample_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise TSDPValidationError(f"Dataset images must be 4-d, got {self.images.shape}")
        n = self.images.shape[0]
        if self.sample_ids.size == 0 and n:
            self.sample_ids = np.arange(n, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.sample_ids.shape[0] != n:
            raise TSDPValidationError("sample_ids length must equal the sample count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise TSDPValidationError("labels must be a vector of length n")
            if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise TSDPValidationError(
                    f"labels must lie in [0, {self.n_classes})"
                )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_histogram(self) -> np.ndarray:
        if self.labels is None:
            raise TSDPValidationError("Dataset has no labels")
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class MiaSplit:
    """Disjoint quarters used by membership inference."""

    target_train: Dataset
    target_test: Dataset
    shadow_train: Dataset
    shadow_test: Dataset

    def parts(self) -> List[Dataset]:
        return [self.target_train, self.target_test, self.shadow_train, self.shadow_test]

    @property
    def attacker_pool(self) -> Dataset:
        """Shadow data: the portion an attacker may hold with ground-truth labels."""
        return concat_datasets(self.shadow_train, self.shadow_test)


def class_templates(
    n_classes: int,
    side: int,
    channels: int = 1,
    distribution: str = "public",
    template_seed: int = 0,
) -> np.ndarray:
    """Blocky random templates in [0.15, 0.85], one per class."""
    rng = make_rng(template_seed, "templates", distribution)
    grid = max(2, side // 3)
    reps = -(-side // grid)
    coarse = rng.uniform(0.0, 1.0, size=(n_classes, channels, grid, grid))
    full = np.repeat(np.repeat(coarse, reps, axis=2), reps, axis=3)[:, :, :side, :side]
    return 0.15 + 0.7 * full


def gen_synthetic(
    n_classes: int,
    n_per_class: int,
    side: int,
    seed: int,
    channels: int = 1,
    noise: float = 0.1,
    jitter: int = 1,
    distribution: str = "public",
    template_seed: int = 0,
    id_offset: int = 0,
) -> Dataset:
    """
    Generate `n_classes * n_per_class` images, class-major order.

    Each image is its class template shifted by an integer offset in
    [-jitter, jitter] on both axes (wrap-around) plus N(0, noise^2) noise.
    """
    if side < 4:
        raise TSDPValidationError("side must be >= 4")
    if n_classes < 2:
        raise TSDPValidationError("n_classes must be >= 2")
    if n_per_class < 1:
        raise TSDPValidationError("n_per_class must be >= 1")
    if distribution not in DISTRIBUTIONS:
        raise TSDPValidationError(f"Unknown distribution '{distribution}'")

    templates = class_templates(n_classes, side, channels, distribution, template_seed)
    rng = make_rng(seed, "samples", distribution)
    n = n_classes * n_per_class
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = templates[labels].copy()

    if jitter:
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            if dy or dx:
                images[i] = np.roll(images[i], (int(dy), int(dx)), axis=(1, 2))
    if noise:
        images += rng.normal(0.0, noise, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)

    logger.debug(
        f"Generated {n} {distribution} samples ({n_classes} classes, side {side}, "
        f"seed {seed})"
    )
    return Dataset(
        images=images,
        labels=labels,
        n_classes=n_classes,
        seed=seed,
        distribution=distribution,
        sample_ids=np.arange(id_offset, id_offset + n, dtype=np.int64),
    )


def subset(d: Dataset, idx: Sequence[int]) -> Dataset:
    idx = np.asarray(idx, dtype=np.int64)
    return Dataset(
        images=d.images[idx],
        labels=None if d.labels is None else d.labels[idx],
        n_classes=d.n_classes,
        seed=d.seed,
        distribution=d.distribution,
        sample_ids=d.sample_ids[idx] if idx.size else np.zeros(0, dtype=np.int64),
    )


def concat_datasets(a: Dataset, b: Dataset) -> Dataset:
    if a.n_classes != b.n_classes or a.sample_shape != b.sample_shape:
        raise TSDPValidationError("Cannot concatenate datasets of different tasks")
    if (a.labels is None) != (b.labels is None):
        raise TSDPValidationError("Cannot concatenate labelled and unlabelled datasets")
    labels = None if a.labels is None else np.concatenate([a.labels, b.labels])
    return Dataset(
        images=np.concatenate([a.images, b.images]),
        labels=labels,
        n_classes=a.n_classes,
        seed=a.seed,
        distribution=a.distribution,
        sample_ids=np.concatenate([a.sample_ids, b.sample_ids]),
    )


def make_mia_split(d: Dataset, seed: int) -> MiaSplit:
    """
    Deal the samples into four equal, disjoint, class-stratified quarters.

    Within each class the samples are shuffled and dealt round-robin; the
    dealing counter carries over between classes so quarter sizes stay equal.
    """
    n = len(d)
    if n < 4 or n % 4:
        raise TSDPValidationError(f"MIA split needs a multiple of 4 samples, got {n}")
    if d.labels is None:
        raise TSDPValidationError("MIA split needs labelled data")

    rng = make_rng(seed, "mia_split")
    buckets: List[List[int]] = [[], [], [], []]
    counter = 0
    for cls in range(d.n_classes):
        members = np.flatnonzero(d.labels == cls)
        for i in rng.permutation(members):
            buckets[counter % 4].append(int(i))
            counter += 1
    parts = [subset(d, sorted(b)) for b in buckets]
    return MiaSplit(*parts)


def make_attacker_queryset(d_public: Dataset, budget: int, seed: int) -> Dataset:
    """Uniform sample of `budget` images without replacement; labels stripped."""
    if budget < 0 or budget > len(d_public):
        raise TSDPValidationError(
            f"Query budget {budget} outside [0, {len(d_public)}]"
        )
    idx = make_rng(seed, "queryset").permutation(len(d_public))[:budget]
    picked = subset(d_public, idx)
    picked.labels = None
    return picked


def save_dataset(d: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix != DATASET_SUFFIX:
        path = path.with_name(path.name + DATASET_SUFFIX)
    meta: Dict[str, Any] = {
        "n_classes": d.n_classes,
        "seed": d.seed,
        "distribution": d.distribution,
        "has_labels": d.labels is not None,
    }
    arrays = {"images": d.images, "sample_ids": d.sample_ids}
    if d.labels is not None:
        arrays["labels"] = d.labels
    write_container(path, KIND_DATASET, meta, arrays)
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    _, meta, arrays = read_container(path, expected_kind=KIND_DATASET)
    return Dataset(
        images=arrays["images"],
        labels=arrays.get("labels"),
        n_classes=int(meta["n_classes"]),
        seed=int(meta.get("seed", 0)),
        distribution=meta.get("distribution", "public"),
        sample_ids=arrays["sample_ids"],
    )
