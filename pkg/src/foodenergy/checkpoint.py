"""Self-describing model archives shared by encoders and decoders.

An archive is a ``torch.save`` dict with a fixed envelope::

    {"format": "foodenergy", "version": 1, "kind": "encoder" | "decoder",
     "decoder_kind": ... (decoders only), ...payload}

Only tensors and plain Python containers are stored, so archives load with
``weights_only=True``.
"""
from __future__ import annotations

import os

import torch

from .exceptions import ParseError

FORMAT = "foodenergy"
VERSION = 1


def save_archive(path, kind: str, payload: dict) -> None:
    archive = {"format": FORMAT, "version": VERSION, "kind": kind}
    archive.update(payload)
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(archive, tmp)
    os.replace(tmp, path)


def load_archive(path, kind: str = None) -> dict:
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise ParseError(f"{os.fspath(path)}: not a readable checkpoint ({exc})") from exc
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise ParseError(f"{os.fspath(path)}: not a {FORMAT} checkpoint")
    if archive.get("version") != VERSION:
        raise ParseError(f"{os.fspath(path)}: unsupported checkpoint version {archive.get('version')}")
    if kind is not None and archive.get("kind") != kind:
        raise ParseError(f"{os.fspath(path)}: expected a {kind} checkpoint, found {archive.get('kind')}")
    return archive
