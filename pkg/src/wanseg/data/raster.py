"""Raster tiles, the fixed-size tiling schemes, empty-patch filtering and weak labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from wanseg.core.functional import _bilinear_matrix
from wanseg.errors import ContractError

WEAK_LABEL_TAU = 0.005
EMPTY_STD_THRESHOLD = 1.0


@dataclass
class RasterTile:
    pixels: np.ndarray                      # (H, W, 3) uint8
    mask: Optional[np.ndarray] = None       # (H, W) in {0, 1}
    dataset_id: str = ""
    tile_id: str = ""
    meters_per_pixel: float = 0.0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ContractError(f"tile pixels must be HxWx3, got {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise ContractError(f"mask {self.mask.shape} does not match pixels {self.pixels.shape[:2]}")


@dataclass
class PatchSample:
    image: np.ndarray                       # (3, S, S) float in [0, 1]
    mask: Optional[np.ndarray] = None       # (S, S) uint8 in {0, 1}
    weak_label: Optional[int] = None
    tile_id: str = ""
    crop_offset: tuple[int, int] = (0, 0)   # in tile pixels
    patch_offset: tuple[int, int] = (0, 0)  # in resized-crop pixels
    extra: dict = field(default_factory=dict)

    @property
    def sample_id(self) -> str:
        cy, cx = self.crop_offset
        py, px = self.patch_offset
        return f"{self.tile_id}_c{cy}-{cx}_p{py}-{px}"


def normalize(pixels: np.ndarray) -> np.ndarray:
    """8-bit HxWx3 (or CxHxW) values to floats in [0, 1]; layout is preserved."""
    return np.asarray(pixels, dtype=np.float64) / 255.0


def denormalize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def resize_image(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (half-pixel centres) resize of an HxWxC uint8 image to ``size``x``size``."""
    h, w = pixels.shape[:2]
    ah = _bilinear_matrix(h, size, "<f8")
    aw = _bilinear_matrix(w, size, "<f8")
    out = np.einsum("oh,hwc,pw->opc", ah, pixels.astype(np.float64), aw, optimize=True)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize followed by re-binarisation at 0.5."""
    h, w = mask.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    m = np.asarray(mask, dtype=np.float64)
    if m.max(initial=0) > 1:
        m = m / 255.0
    return (m[np.ix_(rows, cols)] >= 0.5).astype(np.uint8)


def tile_standard(tile: RasterTile, crop: int = 500, resize: int = 512, patch: int = 256) -> list[PatchSample]:
    """Non-overlapping ``crop`` grid, each crop resized to ``resize`` and split into ``patch`` squares.

    Pixels beyond the last full crop on the right/bottom edge are discarded.
    """
    h, w = tile.pixels.shape[:2]
    if h < crop or w < crop:
        raise ContractError(f"tile {h}x{w} is smaller than the crop size {crop}")
    if resize % patch:
        raise ContractError(f"resize {resize} is not a multiple of patch {patch}")
    out = []
    for cy in range(0, h - crop + 1, crop):
        for cx in range(0, w - crop + 1, crop):
            img = resize_image(tile.pixels[cy:cy + crop, cx:cx + crop], resize)
            msk = None
            if tile.mask is not None:
                msk = resize_mask(tile.mask[cy:cy + crop, cx:cx + crop], resize)
            for py in range(0, resize, patch):
                for px in range(0, resize, patch):
                    pimg = img[py:py + patch, px:px + patch]
                    pmask = None if msk is None else msk[py:py + patch, px:px + patch].copy()
                    out.append(PatchSample(
                        image=normalize(pimg).transpose(2, 0, 1),
                        mask=pmask,
                        weak_label=None if pmask is None else derive_weak_label(pmask),
                        tile_id=tile.tile_id,
                        crop_offset=(cy, cx),
                        patch_offset=(py, px),
                    ))
    return out


def tile_potsdam(tile: RasterTile) -> list[PatchSample]:
    """6000x6000 tile -> 16 sub-images of 1500x1500 -> 512x512 -> 4 patches each (64 total)."""
    if tile.pixels.shape[:2] != (6000, 6000):
        raise ContractError(f"Potsdam tiles are 6000x6000, got {tile.pixels.shape[:2]}")
    return tile_standard(tile, crop=1500, resize=512, patch=256)


def patch_is_empty(image: np.ndarray, threshold: float = EMPTY_STD_THRESHOLD) -> bool:
    """True when every channel's standard deviation (8-bit scale) is below ``threshold``."""
    img = np.asarray(image, dtype=np.float64)
    if img.max(initial=0) <= 1.0:
        img = img * 255.0
    channels = img.reshape(img.shape[0], -1) if img.shape[0] == 3 else img.reshape(-1, img.shape[-1]).T
    return bool(np.all(channels.std(axis=1) < threshold))


def filter_empty(patches: list[PatchSample], threshold: float = EMPTY_STD_THRESHOLD) -> list[PatchSample]:
    return [p for p in patches if not patch_is_empty(p.image, threshold)]


def derive_weak_label(mask: np.ndarray, tau: float = WEAK_LABEL_TAU) -> int:
    """1 iff the positive-pixel fraction is at least ``tau``."""
    m = np.asarray(mask)
    if m.size and not np.all((m == 0) | (m == 1)):
        raise ContractError("derive_weak_label needs a binary (0/1) mask")
    if m.size == 0:
        return 0
    # exact rational comparison so that a fraction equal to tau counts as positive
    return int(Fraction(int(np.count_nonzero(m)), m.size) >= Fraction(tau).limit_denominator(10 ** 9))
