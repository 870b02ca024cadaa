"""Datasets indexed by class and the N-way K-shot episode sampler.

Two data sources are provided: a synthetic generator that draws parametric
image patterns per class (useful for fast, fully reproducible experiments)
and a directory loader for real image folders described by a JSON manifest.
Both produce ``ClassIndexedDataset`` objects from which ``sample_episode``
draws support/query sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ClassRecord",
    "ClassIndexedDataset",
    "Episode",
    "sample_episode",
    "generate_synthetic",
    "generate_synthetic_splits",
    "load_image_folder",
]


@dataclass
class ClassRecord:
    class_id: str
    images: np.ndarray  # [n, C, H, W], float in [0, 1]


@dataclass
class ClassIndexedDataset:
    name: str
    classes: list[ClassRecord]

    def __post_init__(self):
        if not self.classes:
            raise ValueError(f"dataset {self.name!r} has no classes")
        shape = self.classes[0].images.shape[1:]
        for rec in self.classes:
            if rec.images.ndim != 4 or rec.images.shape[1:] != shape:
                raise ValueError(
                    f"dataset {self.name!r}: class {rec.class_id!r} images have shape "
                    f"{rec.images.shape}, expected [n, {', '.join(map(str, shape))}]"
                )
            if rec.images.shape[0] < 1:
                raise ValueError(f"dataset {self.name!r}: class {rec.class_id!r} is empty")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.classes[0].images.shape[1:]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_ids(self) -> list[str]:
        return [rec.class_id for rec in self.classes]


@dataclass(frozen=True)
class Episode:
    """One few-shot task: support/query images with episode-local labels.

    Labels run 0..way-1 in contiguous blocks (class ``i`` occupies rows
    ``i*shot .. (i+1)*shot`` of the support set); ``class_map`` records
    which dataset class each episode label stands for.
    """

    way: int
    shot: int
    query_count: int
    support_images: np.ndarray  # [way*shot, C, H, W]
    support_labels: np.ndarray  # [way*shot] int64
    query_images: np.ndarray  # [way*query_count, C, H, W]
    query_labels: np.ndarray  # [way*query_count] int64
    class_map: dict[int, str]


def sample_episode(
    dataset: ClassIndexedDataset,
    way: int,
    shot: int,
    query: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an episode: ``way`` distinct classes, ``shot + query`` distinct
    images from each, all without replacement."""
    if way < 2:
        raise ValueError(f"way must be >= 2, got {way}")
    if shot < 1 or query < 1:
        raise ValueError(f"shot and query must be >= 1, got shot={shot}, query={query}")
    if way > dataset.num_classes:
        raise ValueError(
            f"dataset {dataset.name!r} has {dataset.num_classes} classes; "
            f"cannot sample a {way}-way episode"
        )
    chosen = rng.choice(dataset.num_classes, size=way, replace=False)
    support_parts, query_parts, class_map = [], [], {}
    for label, cls_idx in enumerate(chosen):
        rec = dataset.classes[int(cls_idx)]
        n = rec.images.shape[0]
        if shot + query > n:
            raise ValueError(
                f"class {rec.class_id!r} has {n} images; episode needs shot+query={shot + query}"
            )
        picks = rng.choice(n, size=shot + query, replace=False)
        support_parts.append(rec.images[picks[:shot]])
        query_parts.append(rec.images[picks[shot:]])
        class_map[label] = rec.class_id
    c, h, w = dataset.image_shape
    return Episode(
        way=way,
        shot=shot,
        query_count=query,
        support_images=np.concatenate(support_parts).reshape(way * shot, c, h, w),
        support_labels=np.repeat(np.arange(way, dtype=np.int64), shot),
        query_images=np.concatenate(query_parts).reshape(way * query, c, h, w),
        query_labels=np.repeat(np.arange(way, dtype=np.int64), query),
        class_map=class_map,
    )


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------


def _pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """A smooth 2-D pattern in [0, 1]: oriented grating plus radial waves."""
    theta = rng.uniform(0.0, np.pi)
    freq_lin = rng.uniform(0.05, 0.25)
    freq_rad = rng.uniform(0.05, 0.25)
    phase_lin = rng.uniform(0.0, 2.0 * np.pi)
    phase_rad = rng.uniform(0.0, 2.0 * np.pi)
    cx, cy = rng.uniform(-5.0, 5.0, size=2)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    xs -= size / 2.0 + cx
    ys -= size / 2.0 + cy
    u = np.cos(theta) * xs + np.sin(theta) * ys
    r = np.sqrt(xs * xs + ys * ys)
    base = (
        0.5
        + 0.25 * np.sin(2.0 * np.pi * freq_lin * u + phase_lin)
        + 0.25 * np.cos(2.0 * np.pi * freq_rad * r + phase_rad)
    )
    return base


def generate_synthetic(
    num_classes: int,
    images_per_class: int,
    noise_sigma: float,
    rng: np.random.Generator,
    image_size: int = 28,
    channels: int = 1,
    name: str = "synthetic",
    class_prefix: str = "class",
) -> ClassIndexedDataset:
    """Each class is one random pattern; images add pixel noise and clip."""
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    classes = []
    for c in range(num_classes):
        base = np.stack([_pattern(rng, image_size) for _ in range(channels)])  # [C,H,W]
        noise = rng.normal(0.0, noise_sigma, size=(images_per_class,) + base.shape)
        images = np.clip(base[None] + noise, 0.0, 1.0)
        classes.append(ClassRecord(class_id=f"{class_prefix}-{c:03d}", images=images))
    return ClassIndexedDataset(name=name, classes=classes)


def generate_synthetic_splits(
    train_classes: int,
    val_classes: int,
    test_classes: int,
    images_per_class: int,
    noise_sigma: float,
    seed: int,
    image_size: int = 28,
    channels: int = 1,
) -> dict[str, ClassIndexedDataset]:
    """Three datasets with globally distinct class identities.

    All class patterns are drawn from one seeded stream, so the full
    collection is reproducible and no pattern is shared across splits.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for split, count in (("train", train_classes), ("val", val_classes), ("test", test_classes)):
        out[split] = generate_synthetic(
            count,
            images_per_class,
            noise_sigma,
            rng,
            image_size=image_size,
            channels=channels,
            name=split,
            class_prefix=split,
        )
    return out


# ----------------------------------------------------------------------
# directory loader
# ----------------------------------------------------------------------


def load_image_folder(root, manifest=None, channels: int = 1) -> dict[str, ClassIndexedDataset]:
    """Load ``root/<class_dir>/*`` image folders into per-split datasets.

    ``manifest`` maps split names to lists of class directory names, e.g.
    ``{"train": ["cat", "dog"], "test": ["fox"]}``; it may be given as a
    dict or a path to a JSON file (default: ``root/manifest.json``).  A
    class directory may appear in at most one split.  Images are loaded
    as grayscale (``channels=1``) or RGB (``channels=3``) and scaled to
    [0, 1].
    """
    from PIL import Image

    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    if manifest is None:
        manifest = root / "manifest.json"
    if not isinstance(manifest, dict):
        manifest_path = Path(manifest)
        if not manifest_path.is_file():
            raise FileNotFoundError(f"manifest {manifest_path} not found")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    if not isinstance(manifest, dict) or not manifest:
        raise ValueError("manifest must map split names to lists of class directories")

    seen: dict[str, str] = {}
    datasets = {}
    expected_shape = None
    for split, class_dirs in manifest.items():
        records = []
        for class_dir in class_dirs:
            if class_dir in seen:
                raise ValueError(
                    f"class directory {class_dir!r} appears in splits "
                    f"{seen[class_dir]!r} and {split!r}; splits must be disjoint"
                )
            seen[class_dir] = split
            cdir = root / class_dir
            if not cdir.is_dir():
                raise FileNotFoundError(f"class directory {cdir} not found")
            files = sorted(p for p in cdir.iterdir() if p.is_file())
            if not files:
                raise ValueError(f"class directory {cdir} contains no files")
            images = []
            for path in files:
                with Image.open(path) as img:
                    if channels == 1:
                        arr = np.asarray(img.convert("L"), dtype=np.float64)[None] / 255.0
                    else:
                        arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
                images.append(arr)  # [C,H,W]
            stack = np.stack(images)
            if expected_shape is None:
                expected_shape = stack.shape[1:]
            elif stack.shape[1:] != expected_shape:
                raise ValueError(
                    f"class {class_dir!r} images have shape {stack.shape[1:]}, "
                    f"expected {expected_shape}"
                )
            records.append(ClassRecord(class_id=class_dir, images=stack))
        datasets[split] = ClassIndexedDataset(name=split, classes=records)
    return datasets
