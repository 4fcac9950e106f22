"""Per-pixel calorie density maps.

A density map spreads each food item's calories uniformly over the pixels of
its segmentation mask, so the sum over the whole map equals the meal's total
energy. Ground-truth maps are held as float64 in memory; the on-disk format
(see :mod:`foodenergy.io`) stores float32. Every sum is accumulated in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    NonPositiveScale,
    OverlappingSupport,
    ShapeMismatch,
    ValidationError,
    ZeroAreaMask,
)

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def round_half_away(x):
    """Round to the nearest integer, ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def as_mask(pixels) -> np.ndarray:
    """Coerce a 0/1 (or boolean) grid into a boolean mask, rejecting anything else."""
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("mask cells must be 0 or 1")
    return arr.astype(bool)


@dataclass
class FoodItemAnnotation:
    """One annotated food item: free-form label, energy in kCal and its mask.

    ``kcal`` may be ``None`` for raw, not-yet-pruned annotations.
    """

    label: str
    kcal: Optional[float]
    mask: np.ndarray

    def __post_init__(self):
        self.mask = as_mask(self.mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class GrayscaleMap:
    """8-bit quantized density map; each level is worth ``scale`` kCal per pixel."""

    values: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise NonPositiveScale(f"scale must be > 0, got {self.scale}")
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeMismatch(f"grayscale map must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0 or values.max() > 255):
            raise ValidationError("grayscale values must lie in [0, 255]")
        object.__setattr__(self, "values", values.astype(np.uint8))

    @property
    def shape(self):
        return self.values.shape


def generate_item_density(item: FoodItemAnnotation) -> np.ndarray:
    area = item.area
    if area == 0:
        raise ZeroAreaMask(f"mask of item {item.label!r} has no foreground pixels")
    if item.kcal is None or not item.kcal > 0:
        raise ValidationError(f"item {item.label!r} needs a positive kcal, got {item.kcal}")
    out = np.zeros(item.mask.shape, dtype=np.float64)
    out[item.mask] = float(item.kcal) / area
    return out


def combine_item_densities(maps: Sequence[np.ndarray], shape=None) -> np.ndarray:
    """Merge per-item maps with pairwise-disjoint supports into one map.

    ``shape`` is required when ``maps`` is empty and checked otherwise.
    """
    if not maps:
        if shape is None:
            raise ShapeMismatch("cannot combine an empty list without a declared shape")
        return np.zeros(tuple(shape), dtype=np.float64)
    shape = tuple(shape) if shape is not None else np.shape(maps[0])
    out = np.zeros(shape, dtype=np.float64)
    occupied = np.zeros(shape, dtype=bool)
    for i, m in enumerate(maps):
        m = np.asarray(m)
        if m.shape != shape:
            raise ShapeMismatch(f"map {i} has shape {m.shape}, expected {shape}")
        support = m != 0
        clash = occupied & support
        if clash.any():
            r, c = np.argwhere(clash)[0]
            raise OverlappingSupport(f"map {i} overlaps an earlier map at ({r}, {c})")
        occupied |= support
        out += m
    return out


def summation_decode(density_map) -> float:
    """Total energy in kCal: the correctly rounded float64 sum of every cell.

    ``math.fsum`` makes the result independent of cell order, so flips and
    permutations of a map decode to the identical value.
    """
    return math.fsum(np.asarray(density_map, dtype=np.float64).ravel().tolist())


def encode_grayscale(density_map, scale: float = 1.0) -> GrayscaleMap:
    if not scale > 0:
        raise NonPositiveScale(f"scale must be > 0, got {scale}")
    levels = round_half_away(np.asarray(density_map, dtype=np.float64) / scale)
    return GrayscaleMap(np.clip(levels, 0, 255).astype(np.uint8), scale)


def decode_grayscale(gmap: GrayscaleMap) -> float:
    return gmap.scale * float(np.sum(gmap.values, dtype=np.int64))


def quantize_density(density_map, scale: float = 1.0) -> np.ndarray:
    """Density map as seen through the grayscale codec (levels times scale)."""
    gmap = encode_grayscale(density_map, scale)
    return gmap.values.astype(np.float64) * gmap.scale


def flip(array, axis: str):
    """Mirror an image, mask or density map left-right (``horizontal``) or top-bottom."""
    if axis == HORIZONTAL:
        return np.flip(array, axis=1).copy()
    if axis == VERTICAL:
        return np.flip(array, axis=0).copy()
    raise ValueError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")


def render_visualization(density_map) -> np.ndarray:
    """Scale a map by its own maximum onto 0..255 for display."""
    values = np.asarray(density_map, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.clip(round_half_away(values / peak * 255.0), 0, 255).astype(np.uint8)
