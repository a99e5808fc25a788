"""
Dataset ingestion.

Two sources: a procedural shapes generator with known ground-truth factors,
and a class-per-directory image folder. Images are returned as float32
tensors (N, 3, S, S) in [-1, 1]; splits are assigned by hashing ids.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset

from rcdmkit.exceptions import (
    ArtifactError,
    ConfigurationError,
    ShapeMismatchError,
    UnknownIdError,
)

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "square", "triangle", "cross")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class DatasetFormat(Enum):
    SHAPES = "shapes"
    IMAGE_FOLDER = "image_folder"


class Split(Enum):
    ALL = "all"
    TRAIN = "train"
    VAL = "val"


@dataclass
class ImageDataset:
    """Images with stable ids, optional labels and ground-truth factors."""

    images: torch.Tensor
    ids: List[str]
    labels: Optional[torch.Tensor] = None
    class_names: List[str] = field(default_factory=list)
    factors: Dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeMismatchError(
                f"images must be (N, C, H, W), got {tuple(self.images.shape)}"
            )
        if len(self.ids) != self.images.shape[0]:
            raise ShapeMismatchError(
                f"{len(self.ids)} ids for {self.images.shape[0]} images"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("dataset ids must be unique")
        if self.labels is not None and self.labels.shape[0] != self.images.shape[0]:
            raise ShapeMismatchError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        if self.labels is None or len(self) == 0:
            return 0
        return int(torch.unique(self.labels).numel())

    def index_of(self, item_id: str) -> int:
        try:
            return self.ids.index(item_id)
        except ValueError:
            raise UnknownIdError(f"unknown dataset id: {item_id}") from None

    def subset(
        self, indices: Sequence[int], name: Optional[str] = None
    ) -> "ImageDataset":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return ImageDataset(
            images=self.images[index],
            ids=[self.ids[i] for i in index.tolist()],
            labels=self.labels[index] if self.labels is not None else None,
            class_names=list(self.class_names),
            factors={k: v[index.numpy()] for k, v in self.factors.items()},
            name=name or self.name,
        )

    def split(self, val_fraction: float) -> Tuple["ImageDataset", "ImageDataset"]:
        """Deterministic train/val split by hashing ids."""
        if not 0.0 <= val_fraction < 1.0:
            raise ConfigurationError(
                f"val_fraction must be in [0, 1), got {val_fraction}"
            )
        in_val = [hash_fraction(i) < val_fraction for i in self.ids]
        train = [i for i, v in enumerate(in_val) if not v]
        val = [i for i, v in enumerate(in_val) if v]
        return (
            self.subset(train, f"{self.name}:train"),
            self.subset(val, f"{self.name}:val"),
        )

    def digest(self) -> str:
        """sha256 over image bytes, ids and labels."""
        digest = hashlib.sha256()
        pixels = self.images.detach().cpu().contiguous().numpy().astype("<f4")
        digest.update(pixels.tobytes())
        digest.update("\n".join(self.ids).encode("utf-8"))
        if self.labels is not None:
            digest.update(self.labels.cpu().numpy().astype("<i8").tobytes())
        return digest.hexdigest()


def hash_fraction(item_id: str) -> float:
    """Map an id to a stable number in [0, 1)."""
    value = int.from_bytes(hashlib.sha256(item_id.encode("utf-8")).digest()[:8], "big")
    return value / 2.0**64


def render_shapes(count: int, seed: int, image_size: int = 32) -> ImageDataset:
    """Render colored geometric shapes on colored backgrounds.

    Ground-truth factors (class, colors, scale, position) are returned in
    ``factors`` so invariance measurements can be checked against them.
    """
    if count < 1:
        raise ArtifactError("empty dataset: shapes count must be >= 1")
    rng = np.random.default_rng(seed)
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=count)
    scales = rng.uniform(0.18, 0.38, size=count) * size
    centers = np.empty((count, 2))
    fg_colors = rng.uniform(0.0, 1.0, size=(count, 3))
    bg_colors = np.empty((count, 3))

    for n in range(count):
        r = scales[n]
        cx, cy = rng.uniform(r, size - r, size=2)
        centers[n] = (cx, cy)
        bg = rng.uniform(0.0, 1.0, size=3)
        while np.abs(bg - fg_colors[n]).sum() < 0.6:
            bg = rng.uniform(0.0, 1.0, size=3)
        bg_colors[n] = bg

        dx, dy = xx - cx, yy - cy
        kind = SHAPE_CLASSES[labels[n]]
        if kind == "circle":
            mask = dx**2 + dy**2 <= r**2
        elif kind == "square":
            mask = (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
        elif kind == "triangle":
            mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
        else:
            bar = r / 3.0
            horizontal = (np.abs(dx) <= bar) & (np.abs(dy) <= r)
            vertical = (np.abs(dy) <= bar) & (np.abs(dx) <= r)
            mask = horizontal | vertical

        pixels = np.where(mask[None], fg_colors[n][:, None, None], bg[:, None, None])
        images[n] = (pixels * 2.0 - 1.0).astype(np.float32)

    return ImageDataset(
        images=torch.from_numpy(images),
        ids=[f"shape-{n:05d}" for n in range(count)],
        labels=torch.from_numpy(labels.astype(np.int64)),
        class_names=list(SHAPE_CLASSES),
        factors={
            "shape": labels.astype(np.int64),
            "scale": scales,
            "center": centers,
            "fg_color": fg_colors,
            "bg_color": bg_colors,
        },
        name=f"shapes-{seed}-{count}",
    )


def load_image(path: Union[str, Path], image_size: int = 32) -> np.ndarray:
    """One image as a float32 (3, S, S) array in [-1, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            array = np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError) as e:
        raise ArtifactError(f"unreadable image {path}: {e}") from e
    return (array / 127.5 - 1.0).transpose(2, 0, 1)


class _ImageFiles(Dataset):
    def __init__(self, files: Sequence[Path], image_size: int):
        self.files = list(files)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, index: int) -> np.ndarray:
        return load_image(self.files[index], self.image_size)


def load_image_folder(
    path: Union[str, Path], image_size: int = 32, workers: int = 0
) -> ImageDataset:
    """Load a class-per-directory image folder; labels follow sorted directory names."""
    root = Path(path)
    if not root.is_dir():
        raise ArtifactError(f"unreadable dataset path: {root}")

    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    files: List[Path] = []
    labels: List[int] = []
    for label, class_dir in enumerate(class_dirs):
        for file in sorted(class_dir.rglob("*")):
            if file.is_file() and file.suffix.lower() in IMAGE_SUFFIXES:
                files.append(file)
                labels.append(label)
    if not files:
        raise ArtifactError(f"empty dataset: no images under {root}")

    # unshuffled loader keeps file order whatever the worker count
    loader = DataLoader(
        _ImageFiles(files, image_size),
        batch_size=None,
        shuffle=False,
        num_workers=workers,
    )
    arrays = [np.asarray(array) for array in loader]

    logger.info(f"Loaded {len(files)} images in {len(class_dirs)} classes from {root}")
    return ImageDataset(
        images=torch.from_numpy(np.stack(arrays)),
        ids=[f.relative_to(root).as_posix() for f in files],
        labels=torch.tensor(labels, dtype=torch.long),
        class_names=[d.name for d in class_dirs],
        name=root.name,
    )


def ingest_dataset(
    path: Optional[Union[str, Path]],
    fmt: Union[str, DatasetFormat] = DatasetFormat.SHAPES,
    split: Union[str, Split] = Split.ALL,
    *,
    count: int = 1000,
    seed: int = 7,
    image_size: int = 32,
    val_fraction: float = 0.2,
    workers: int = 0,
) -> ImageDataset:
    """Load a dataset and return the requested split.

    Args:
        path: Image folder root (ignored for the shapes generator)
        fmt: ``shapes`` or ``image_folder``
        split: ``all``, ``train`` or ``val``
        count: Number of shapes to render
        seed: Shapes generator seed
        image_size: Output resolution
        val_fraction: Share of ids hashed into the validation split
        workers: Image decoding worker processes (0 decodes in-process)

    Returns:
        ImageDataset: The requested split
    """
    try:
        fmt = DatasetFormat(fmt.value if isinstance(fmt, DatasetFormat) else fmt)
        split = Split(split.value if isinstance(split, Split) else split)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e

    if fmt is DatasetFormat.SHAPES:
        dataset = render_shapes(count, seed, image_size)
    else:
        if path is None:
            raise ArtifactError("image_folder format needs a dataset path")
        dataset = load_image_folder(path, image_size, workers)

    if split is Split.ALL:
        return dataset
    train, val = dataset.split(val_fraction)
    chosen = train if split is Split.TRAIN else val
    if len(chosen) == 0:
        raise ArtifactError(
            f"empty dataset: split {split.value} of {dataset.name} has no items"
        )
    return chosen


def dataset_from_config(
    section: Dict[str, Any], split: Union[str, Split] = Split.ALL
) -> ImageDataset:
    """Ingest the dataset described by the ``data`` config section."""
    return ingest_dataset(
        section.get("path"),
        section.get("format", "shapes"),
        split,
        count=int(section.get("count", 1000)),
        seed=int(section.get("seed", 7)),
        image_size=int(section.get("image_size", 32)),
        val_fraction=float(section.get("val_fraction", 0.2)),
        workers=int(section.get("workers", 0)),
    )
