"""Eating occasions: manifest I/O, validation and pruning, resizing, splitting,
augmentation, and a synthetic scene generator for desk-scale experiments.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import io
from .density import (
    HORIZONTAL,
    VERTICAL,
    FoodItemAnnotation,
    combine_item_densities,
    flip,
    generate_item_density,
)
from .exceptions import ParseError, PlacementFailure, TooFewInstances, ValidationError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_RATIOS = (0.70, 0.10, 0.20)


@dataclass
class EatingOccasion:
    id: str
    image: np.ndarray
    items: List[FoodItemAnnotation]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape[:2]

    @property
    def total_kcal(self) -> Optional[float]:
        if any(item.kcal is None for item in self.items):
            return None
        return float(sum(item.kcal for item in self.items))

    def density_map(self) -> np.ndarray:
        """Ground-truth density map (float64) built from the item masks."""
        maps = [generate_item_density(item) for item in self.items]
        return combine_item_densities(maps, shape=self.shape)

    def problems(self) -> List[str]:
        """Every invariant this occasion violates, as short reasons; empty if valid."""
        reasons = []
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            reasons.append("image is not an 8-bit RGB grid")
            return reasons
        if not self.items:
            reasons.append("no items")
        seen = np.zeros(self.shape, dtype=bool)
        for item in self.items:
            if item.kcal is None:
                reasons.append("missing kcal")
            elif not (math.isfinite(item.kcal) and item.kcal > 0):
                reasons.append("non-positive kcal")
            if item.mask.shape != self.shape:
                reasons.append("mask shape mismatch")
                continue
            if not item.mask.any():
                reasons.append("empty mask")
            if (seen & item.mask).any():
                reasons.append("overlapping masks")
            seen |= item.mask
        return list(dict.fromkeys(reasons))

    def validate(self) -> None:
        reasons = self.problems()
        if reasons:
            raise ValidationError("; ".join(reasons), occasion_id=self.id)


# -- manifest -----------------------------------------------------------------

def _parse_occasion(entry, base_dir, target_size):
    occ_id = entry.get("id")
    if not isinstance(occ_id, str):
        raise ParseError(f"occasion entry without a string id: {entry!r}")
    if "image" not in entry or not isinstance(entry.get("items"), list):
        raise ValidationError("entry needs 'image' and an 'items' list", occasion_id=occ_id)
    image = io.read_image_png(os.path.join(base_dir, entry["image"]))
    items = []
    for k, raw in enumerate(entry["items"]):
        if "mask" not in raw:
            raise ValidationError("item has no mask", occasion_id=occ_id, item_index=k)
        try:
            mask = io.read_mask_png(os.path.join(base_dir, raw["mask"]))
        except ValidationError as exc:
            raise ValidationError(str(exc), occasion_id=occ_id, item_index=k) from exc
        kcal = raw.get("kcal")
        if kcal is not None and (isinstance(kcal, bool) or not isinstance(kcal, (int, float))):
            raise ValidationError(f"kcal must be a number, got {kcal!r}", occasion_id=occ_id, item_index=k)
        items.append(FoodItemAnnotation(str(raw.get("label", "")), None if kcal is None else float(kcal), mask))
    if target_size is not None and image.shape[:2] != (target_size, target_size):
        image, masks = regularize_image(image, [it.mask for it in items], target_size)
        for item, mask in zip(items, masks):
            item.mask = mask
    return EatingOccasion(occ_id, image, items)


def _read(path, target_size):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{os.fspath(path)}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{os.fspath(path)}: expected a version {MANIFEST_VERSION} manifest")
    entries = doc.get("occasions")
    if not isinstance(entries, list) or not all(isinstance(e, dict) for e in entries):
        raise ParseError(f"{os.fspath(path)}: 'occasions' must be a list of objects")

    base_dir = os.path.dirname(os.path.abspath(path))
    occasions, errors = [], []
    for entry in entries:
        try:
            occasions.append(_parse_occasion(entry, base_dir, target_size))
        except ValidationError as exc:
            errors.append((entry.get("id"), exc))
        except OSError as exc:
            errors.append((entry.get("id"), ValidationError(str(exc), occasion_id=entry.get("id"))))
    return occasions, errors


def read_manifest(path, target_size: Optional[int] = None):
    """Parse a manifest without enforcing occasion invariants.

    Returns ``(occasions, failures)`` where ``failures`` maps the ids of
    occasions that could not be loaded at all (unreadable files, malformed
    masks) to a reason. Raises :class:`ParseError` when the document itself
    is malformed.
    """
    occasions, errors = _read(path, target_size)
    return occasions, {occ_id: str(exc) for occ_id, exc in errors}


def load_manifest(path, target_size: Optional[int] = None) -> List[EatingOccasion]:
    """Load and fully validate a manifest; the first bad occasion raises ValidationError."""
    occasions, errors = _read(path, target_size)
    if errors:
        raise errors[0][1]
    for occ in occasions:
        for k, item in enumerate(occ.items):
            if item.kcal is None:
                raise ValidationError("kcal missing", occasion_id=occ.id, item_index=k)
        occ.validate()
    return occasions


def save_manifest(occasions: Sequence[EatingOccasion], out_dir, name: str = "manifest.json") -> str:
    """Write images, masks and the manifest JSON under ``out_dir``; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for occ in occasions:
        image_rel = f"images/{occ.id}.png"
        io.write_image_png(os.path.join(out_dir, image_rel), occ.image)
        items = []
        for k, item in enumerate(occ.items):
            mask_rel = f"masks/{occ.id}_{k}.png"
            io.write_mask_png(os.path.join(out_dir, mask_rel), item.mask)
            record = {"label": item.label, "mask": mask_rel}
            if item.kcal is not None:
                record["kcal"] = item.kcal
            items.append(record)
        entries.append({"id": occ.id, "image": image_rel, "items": items})
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump({"version": MANIFEST_VERSION, "occasions": entries}, fh, indent=1)
        fh.write("\n")
    return path


# -- pruning, resizing, splitting, augmentation ------------------------------

def prune(occasions: Sequence[EatingOccasion]):
    """Drop invalid occasions. Returns ``(kept, rejected)`` with ``rejected`` as id -> reason."""
    kept, rejected = [], {}
    for occ in occasions:
        reasons = occ.problems()
        if reasons:
            rejected[occ.id] = "; ".join(reasons)
        else:
            kept.append(occ)
    if rejected:
        logger.info("pruned %d of %d occasions", len(rejected), len(occasions))
    return kept, rejected


def regularize_image(image, masks, target: int = 256):
    """Resize an image (bilinear) and its masks (nearest) to ``target`` x ``target``."""
    if target < 8:
        raise ValueError(f"target size must be >= 8, got {target}")
    image = np.asarray(image, dtype=np.uint8)
    if image.shape[:2] == (target, target):
        return image.copy(), [np.asarray(m, dtype=bool).copy() for m in masks]
    resized = np.asarray(Image.fromarray(image).resize((target, target), Image.BILINEAR))
    out_masks = []
    for m in masks:
        pil = Image.fromarray(np.asarray(m, dtype=bool).astype(np.uint8) * 255)
        out_masks.append(np.asarray(pil.resize((target, target), Image.NEAREST)) == 255)
    return resized, out_masks


@dataclass(frozen=True)
class DatasetSplit:
    train: List[str]
    val: List[str]
    test: List[str]
    seed: int
    ratios: Tuple[float, float, float] = DEFAULT_RATIOS

    def to_dict(self) -> Dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "seed": self.seed, "ratios": list(self.ratios)}

    @classmethod
    def from_dict(cls, d) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]), tuple(d["ratios"]))


def split(occasions, seed: int, ratios=DEFAULT_RATIOS) -> DatasetSplit:
    """Shuffle under ``seed``; test and val sizes are floored, train takes the remainder.

    ``occasions`` may be occasions or bare ids. ``ratios`` is (train, val, test).
    """
    ids = [getattr(o, "id", o) for o in occasions]
    n = len(ids)
    if n < 3:
        raise TooFewInstances(f"need at least 3 occasions to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("occasion ids must be unique")
    _, val_ratio, test_ratio = ratios
    n_test = math.floor(test_ratio * n)
    n_val = math.floor(val_ratio * n)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    return DatasetSplit(train, val, test, seed, tuple(ratios))


def select(occasions: Sequence[EatingOccasion], ids: Sequence[str]) -> List[EatingOccasion]:
    by_id = {o.id: o for o in occasions}
    return [by_id[i] for i in ids]


_FLIPS = (("", ()), ("h", (HORIZONTAL,)), ("v", (VERTICAL,)), ("hv", (HORIZONTAL, VERTICAL)))


def augment_fourfold(occasion: EatingOccasion) -> List[EatingOccasion]:
    """Identity, horizontal, vertical and both flips of one training occasion."""
    variants = []
    for suffix, axes in _FLIPS:
        image = occasion.image.copy()
        masks = [item.mask.copy() for item in occasion.items]
        for axis in axes:
            image = flip(image, axis)
            masks = [flip(m, axis) for m in masks]
        items = [FoodItemAnnotation(it.label, it.kcal, m) for it, m in zip(occasion.items, masks)]
        variants.append(EatingOccasion(f"{occasion.id}#{suffix}" if suffix else occasion.id, image, items))
    return variants


def augment_all(occasions: Sequence[EatingOccasion]) -> List[EatingOccasion]:
    return [v for occ in occasions for v in augment_fourfold(occ)]


# -- synthetic scenes -----------------------------------------------------------

@dataclass(frozen=True)
class ShapeClass:
    label: str
    color: Tuple[int, int, int]
    density: float  # kCal per foreground pixel


DEFAULT_PALETTE = (
    ShapeClass("greens", (60, 140, 50), 0.4),
    ShapeClass("rice", (235, 205, 120), 0.8),
    ShapeClass("meat", (140, 70, 40), 1.5),
    ShapeClass("dessert", (200, 50, 120), 2.5),
)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    n_scenes: int = 200
    image_size: int = 64
    items_per_scene: Tuple[int, int] = (1, 4)
    palette: Tuple[ShapeClass, ...] = DEFAULT_PALETTE
    seed: int = 0
    extent: Tuple[float, float] = (0.07, 0.17)  # shape half-size as a fraction of image size
    color_jitter: int = 8
    noise_std: float = 3.0
    max_retries: int = 500
    table_color: Tuple[int, int, int] = (110, 90, 70)
    plate_color: Tuple[int, int, int] = (228, 228, 222)

    def __post_init__(self):
        lo, hi = self.items_per_scene
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid items_per_scene range {self.items_per_scene}")
        if not self.palette or any(c.density <= 0 for c in self.palette):
            raise ValueError("palette densities must be > 0")


def _shape_mask(rng, size, extent, plate):
    lo, hi = extent
    ry, rx = rng.uniform(lo * size, hi * size, size=2)
    cy, cx = rng.uniform(0, size, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    else:
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return mask if mask.any() and not (mask & ~plate).any() else None


def _grow(mask):
    """Mask dilated by one pixel (4-neighbourhood); keeps a visible gap between shapes."""
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def generate_synthetic(config: SyntheticSceneConfig = SyntheticSceneConfig()) -> List[EatingOccasion]:
    """Render plate scenes of non-overlapping shapes whose energy is density x area."""
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    plate = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= (0.48 * size) ** 2
    lo, hi = config.items_per_scene
    scenes = []
    for idx in range(config.n_scenes):
        canvas = np.empty((size, size, 3), dtype=np.float64)
        canvas[:] = config.table_color
        canvas[plate] = config.plate_color
        occupied = np.zeros((size, size), dtype=bool)
        items = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            cls = config.palette[int(rng.integers(len(config.palette)))]
            for _attempt in range(config.max_retries):
                mask = _shape_mask(rng, size, config.extent, plate)
                if mask is not None and not (_grow(mask) & occupied).any():
                    break
            else:
                raise PlacementFailure(
                    f"scene {idx}: could not place a shape after {config.max_retries} attempts"
                )
            occupied |= mask
            jitter = rng.integers(-config.color_jitter, config.color_jitter + 1, size=3)
            canvas[mask] = np.asarray(cls.color) + jitter
            items.append(FoodItemAnnotation(cls.label, cls.density * int(mask.sum()), mask))
        if config.noise_std > 0:
            canvas += rng.normal(0.0, config.noise_std, size=canvas.shape)
        image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        scenes.append(EatingOccasion(f"syn{idx:05d}", image, items))
    return scenes
