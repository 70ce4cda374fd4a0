"""PPM/PGM patch files and the manifest CSV (``path,split,weak_label,mask_path``)."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from wanseg.data.dataset import PatchSet
from wanseg.errors import ContractError

MANIFEST_FIELDS = ["path", "split", "weak_label", "mask_path"]
SPLITS = ("train", "val", "test")


def write_ppm(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask written as P5 with values 0/255."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(m, mode="L").save(path, format="PPM")


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)


@dataclass(frozen=True)
class ManifestRow:
    path: str
    split: str
    weak_label: Optional[int]
    mask_path: Optional[str]


def write_manifest(path, rows: list[ManifestRow]) -> None:
    seen = set()
    for r in rows:
        if r.path in seen:
            raise ContractError(f"manifest references {r.path} twice")
        seen.add(r.path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.path, r.split, "" if r.weak_label is None else int(r.weak_label),
                             r.mask_path or ""])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ContractError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for rec in reader:
            wl = rec["weak_label"].strip()
            if wl not in ("", "0", "1"):
                raise ContractError(f"{path}: weak_label must be 0, 1 or empty, got {wl!r}")
            rows.append(ManifestRow(rec["path"], rec["split"], int(wl) if wl else None,
                                    rec["mask_path"].strip() or None))
    seen = set()
    for r in rows:
        if r.path in seen:
            raise ContractError(f"{path}: {r.path} listed twice")
        seen.add(r.path)
    return rows


def load_manifest(path, split: str, with_masks: bool = True, require_weak_labels: bool = False) -> PatchSet:
    """Load one split into memory. With ``with_masks=False`` mask files are never opened."""
    base = Path(path).parent
    rows = [r for r in read_manifest(path) if r.split == split]
    if with_masks:
        missing = [r.path for r in rows if r.mask_path is None]
        if missing:
            raise ContractError(f"{path}: split {split!r} has samples without masks, e.g. {missing[0]}")
    if require_weak_labels:
        missing = [r.path for r in rows if r.weak_label is None]
        if missing:
            raise ContractError(f"{path}: split {split!r} lacks weak labels, e.g. {missing[0]}")
    images = np.stack([read_rgb(base / r.path).transpose(2, 0, 1) for r in rows]).astype(np.float32) / 255.0 \
        if rows else np.zeros((0, 3, 0, 0), np.float32)
    masks = None
    if with_masks and rows:
        masks = np.stack([read_mask(base / r.mask_path)[None] for r in rows])
    weak = None
    if rows and all(r.weak_label is not None for r in rows):
        weak = np.array([r.weak_label for r in rows], dtype=np.int64)
    ids = [os.path.splitext(os.path.basename(r.path))[0] for r in rows]
    return PatchSet(images, masks, weak, ids)
