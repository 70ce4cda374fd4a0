from wanseg.data.dataset import PatchSet
from wanseg.data.raster import (
    PatchSample,
    RasterTile,
    denormalize,
    derive_weak_label,
    filter_empty,
    normalize,
    tile_potsdam,
    tile_standard,
)
from wanseg.data.synth import SyntheticDomainSpec, synth_generate

__all__ = [
    "PatchSample", "PatchSet", "RasterTile", "SyntheticDomainSpec", "denormalize", "derive_weak_label",
    "filter_empty", "normalize", "synth_generate", "tile_potsdam", "tile_standard",
]
