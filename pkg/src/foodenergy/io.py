"""On-disk formats: DMAP density maps, binary mask PNGs and RGB image PNGs.

DMAP v1 is an ASCII header ``DMAPv1 <H> <W>\\n`` followed by ``H*W``
little-endian float32 values in row-major order.
"""
from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from .exceptions import ParseError, ValidationError

DMAP_MAGIC = b"DMAPv1"
_HEADER_RE = re.compile(rb"^DMAPv1 (\d+) (\d+)\n")
_MAX_HEADER = 64


def write_dmap(path, density_map) -> None:
    values = np.asarray(density_map)
    if values.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("density map contains non-finite values")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"%s %d %d\n" % (DMAP_MAGIC, h, w))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    match = _HEADER_RE.match(blob[:_MAX_HEADER])
    if match is None:
        raise ParseError(f"{os.fspath(path)}: not a DMAPv1 file")
    h, w = int(match.group(1)), int(match.group(2))
    if h < 1 or w < 1:
        raise ParseError(f"{os.fspath(path)}: invalid dimensions {h}x{w}")
    payload = blob[match.end():]
    if len(payload) != 4 * h * w:
        raise ParseError(
            f"{os.fspath(path)}: expected {4 * h * w} payload bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def write_mask_png(path, mask) -> None:
    pixels = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def read_mask_png(path) -> np.ndarray:
    """Load a mask PNG; anything but an 8-bit single channel of 0/255 is rejected."""
    with Image.open(path) as img:
        if img.mode != "L":
            raise ValidationError(f"{os.fspath(path)}: mask must be 8-bit single-channel, got mode {img.mode}")
        pixels = np.asarray(img)
    bad = ~np.isin(pixels, (0, 255))
    if bad.any():
        value = int(pixels[bad][0])
        raise ValidationError(f"{os.fspath(path)}: mask pixel value {value} is neither 0 nor 255")
    return pixels == 255


def write_image_png(path, image) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def read_image_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def write_gray_png(path, pixels) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)
