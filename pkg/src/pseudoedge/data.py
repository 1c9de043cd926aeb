"""Samples, dataset I/O in the standard directory layout, and k-fold splits.

Layout::

    root/images/{id}.png|tif     RGB image
    root/masks/{id}.png          16-bit instance mask, 0 = background (optional)
    root/points/{id}.csv         ``row,col`` point annotations (optional)

An image needs a mask or a points file; points win when both exist.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .annotation import extract_points, read_points_csv, validate_points, voronoi_labels, write_points_csv

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff")


@dataclass
class Sample:
    id: str
    image: np.ndarray                      # (H, W, 3) float32 in [0, 1]
    points: np.ndarray                     # (n, 2) int64 row, col
    labels: np.ndarray                     # (H, W) uint8 tri-state
    instance_mask: np.ndarray | None = None
    positive_radius: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3")
        if self.labels.shape != (h, w):
            raise ValueError(f"{self.id}: label map shape {self.labels.shape} != image {(h, w)}")
        if self.instance_mask is not None and self.instance_mask.shape != (h, w):
            raise ValueError(f"{self.id}: mask shape {self.instance_mask.shape} != image {(h, w)}")
        self.points = validate_points(self.points, (h, w))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def foreground(self) -> np.ndarray:
        if self.instance_mask is None:
            raise ValueError(f"{self.id}: no ground-truth mask")
        return self.instance_mask > 0

    def with_(self, **kw) -> "Sample":
        return replace(self, **kw)


def make_sample(id, image, instance_mask=None, points=None, positive_radius=0) -> Sample:
    """Build a sample, deriving points from the mask and labels from the points."""
    image = np.asarray(image, dtype=np.float32)
    if points is None:
        if instance_mask is None:
            raise ValueError(f"{id}: neither a mask nor points")
        points = extract_points(instance_mask)
    h, w = image.shape[:2]
    points = validate_points(points, (h, w))
    labels = voronoi_labels(points, h, w, positive_radius)
    return Sample(id=id, image=image, points=points, labels=labels,
                  instance_mask=None if instance_mask is None else np.asarray(instance_mask, dtype=np.int64),
                  positive_radius=positive_radius)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: instance mask must be single-channel")
    return arr.astype(np.int64)


def write_image(path, image) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.max(initial=0) > 65535:
        raise ValueError("instance ids exceed 16 bits")
    Image.fromarray(mask.astype(np.uint16)).save(path)


def list_ids(root) -> list[str]:
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"{root}: no images/ directory")
    ids = [os.path.splitext(f)[0] for f in os.listdir(img_dir)
           if f.lower().endswith(IMAGE_EXTENSIONS)]
    if len(ids) != len(set(ids)):
        raise ValueError(f"{img_dir}: duplicate image ids with different extensions")
    return sorted(ids)


def _image_path(root, sid):
    for ext in IMAGE_EXTENSIONS:
        p = os.path.join(root, "images", sid + ext)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no image for id {sid!r}")


def load_sample(root, sid, positive_radius=0) -> Sample:
    image = read_image(_image_path(root, sid))
    mask_path = os.path.join(root, "masks", sid + ".png")
    pts_path = os.path.join(root, "points", sid + ".csv")
    mask = read_mask(mask_path) if os.path.exists(mask_path) else None
    points = read_points_csv(pts_path) if os.path.exists(pts_path) else None
    if mask is None and points is None:
        raise FileNotFoundError(f"{sid}: neither masks/{sid}.png nor points/{sid}.csv exists")
    return make_sample(sid, image, mask, points, positive_radius)


def load_dataset(root, positive_radius=0, ids=None) -> list[Sample]:
    """Load every image under ``root`` (or just ``ids``), sorted by id."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root {root!r} does not exist")
    ids = list_ids(root) if ids is None else list(ids)
    return [load_sample(root, sid, positive_radius) for sid in ids]


def save_dataset(samples, root, manifest: dict | None = None) -> None:
    """Write samples in the standard layout, plus ``manifest.json``."""
    for sub in ("images", "masks", "points"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for s in samples:
        write_image(os.path.join(root, "images", s.id + ".png"), s.image)
        if s.instance_mask is not None:
            write_mask(os.path.join(root, "masks", s.id + ".png"), s.instance_mask)
        write_points_csv(os.path.join(root, "points", s.id + ".csv"), s.points)
    doc = {"ids": [s.id for s in samples], "count": len(samples)}
    doc.update(manifest or {})
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


@dataclass(frozen=True)
class FoldSplit:
    k: int
    fold_index: int
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple


def kfold_split(ids, k: int, fold_index: int, seed: int = 0) -> FoldSplit:
    """Shuffle once by seed, cut into ``k`` near-equal folds.

    The test set is fold ``fold_index``, validation the next fold (mod k),
    training everything else.
    """
    ids = list(ids)
    if k < 3:
        raise ValueError("k must be at least 3")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of samples ({len(ids)})")
    if not 0 <= fold_index < k:
        raise ValueError(f"fold_index must lie in [0, {k})")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]
    val_index = (fold_index + 1) % k
    train = [i for f, chunk in enumerate(folds) if f not in (fold_index, val_index) for i in chunk]
    return FoldSplit(k, fold_index, tuple(train), tuple(folds[val_index]), tuple(folds[fold_index]))
