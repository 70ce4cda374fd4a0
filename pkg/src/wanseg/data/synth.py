"""Procedural two-domain patch generator for desk-scale adaptation experiments.

Each domain is described by a ``SyntheticDomainSpec``: a background palette with
smoothed texture noise, and structures (axis-aligned rectangles or irregular
blobs) drawn in a structure palette. Masks are the structure footprints dilated
by two pixels, so a built-up region includes the immediate surroundings.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from wanseg.data.dataset import PatchSet
from wanseg.data.io import SPLITS, ManifestRow, write_manifest, write_pgm, write_ppm
from wanseg.data.raster import derive_weak_label
from wanseg.errors import ContractError

STYLES = ("rectangles", "blobs")
MASK_DILATION = 2


@dataclass(frozen=True)
class SyntheticDomainSpec:
    background: tuple[int, int, int] = (95, 115, 85)
    background_jitter: float = 8.0
    structure: tuple[int, int, int] = (200, 200, 195)
    structure_jitter: float = 12.0
    style: str = "rectangles"
    density: float = 4.0
    scale_min: int = 5
    scale_max: int = 12
    noise: float = 10.0
    empty_fraction: float = 0.0
    size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.style not in STYLES:
            raise ContractError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.density < 0:
            raise ContractError("density must be non-negative")
        for name in ("background", "structure"):
            rgb = getattr(self, name)
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise ContractError(f"{name} must be three 8-bit values")
        if not 1 <= self.scale_min <= self.scale_max:
            raise ContractError("need 1 <= scale_min <= scale_max")
        if not 0.0 <= self.empty_fraction <= 1.0:
            raise ContractError("empty_fraction must lie in [0, 1]")
        if self.size < 8:
            raise ContractError("size must be at least 8")

    # key=value text form -------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(str(c) for c in v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SyntheticDomainSpec":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ContractError(f"unknown synthetic spec key {key!r}")
            kind = str(kinds[key])
            try:
                if kind.startswith("tuple"):
                    values[key] = tuple(int(c) for c in val.split(","))
                elif kind == "int":
                    values[key] = int(val)
                elif kind == "float":
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError as exc:
                raise ContractError(f"bad value for {key!r}: {val!r}") from exc
        return cls(**values)

    def with_seed(self, seed: int) -> "SyntheticDomainSpec":
        return dataclasses.replace(self, seed=seed)

    @classmethod
    def from_file(cls, path) -> "SyntheticDomainSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# green countryside with grey rectangular roofs vs. arid terrain with pale irregular compounds;
# coverage and the share of empty patches are matched so the pair differs in appearance only
SOURCE_DEFAULT = SyntheticDomainSpec(empty_fraction=0.4)
TARGET_DEFAULT = SyntheticDomainSpec(
    background=(178, 156, 118), background_jitter=8.0,
    structure=(214, 208, 196), structure_jitter=12.0,
    style="blobs", density=3.5, scale_min=6, scale_max=14,
    noise=10.0, empty_fraction=0.5, seed=1,
)


def _sample_rng(spec: SyntheticDomainSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS.index(split), index]))


def _smooth_noise(rng, shape, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def _blob(rng, s: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    dist = np.hypot(yy - cy, xx - cx) / radius
    wobble = _smooth_noise(rng, (s, s), sigma=max(radius / 2.0, 1.0))
    return dist + 0.35 * wobble < 1.0


def render_patch(spec: SyntheticDomainSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (S, S, 3) uint8 image and its (S, S) binary mask."""
    s = spec.size
    bg = np.asarray(spec.background, float) + rng.normal(0.0, spec.background_jitter, 3)
    texture = _smooth_noise(rng, (s, s), 1.0)[..., None] * spec.noise
    grain = rng.normal(0.0, spec.noise * 0.3, (s, s, 3))
    img = bg + texture + grain
    footprint = np.zeros((s, s), bool)
    empty = rng.random() < spec.empty_fraction
    count = 0 if empty else int(rng.poisson(spec.density))
    for _ in range(count):
        color = np.asarray(spec.structure, float) + rng.normal(0.0, spec.structure_jitter, 3)
        if spec.style == "rectangles":
            h, w = rng.integers(spec.scale_min, spec.scale_max + 1, size=2)
            y0, x0 = rng.integers(0, s - h + 1), rng.integers(0, s - w + 1)
            shape = np.zeros((s, s), bool)
            shape[y0:y0 + h, x0:x0 + w] = True
        else:
            radius = rng.uniform(spec.scale_min, spec.scale_max) / 2.0
            cy, cx = rng.uniform(radius, s - radius, size=2)
            shape = _blob(rng, s, cy, cx, radius)
        img[shape] = color + texture[shape] * 0.5 + grain[shape]
        footprint |= shape
    mask = ndimage.binary_dilation(footprint, structure=np.ones((2 * MASK_DILATION + 1,) * 2, bool))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def generate_split(spec: SyntheticDomainSpec, split: str, count: int, workers: int = 1):
    """Deterministic list of (image, mask) for one split; sample ``i`` depends only on (seed, split, i)."""
    def one(i):
        return render_patch(spec, _sample_rng(spec, split, i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(count)))
    return [one(i) for i in range(count)]


def to_patchset(samples) -> PatchSet:
    if not samples:
        return PatchSet(np.zeros((0, 3, 0, 0), np.float32), None, None, [])
    images = np.stack([img.transpose(2, 0, 1) for img, _ in samples]).astype(np.float32) / 255.0
    masks = np.stack([m[None] for _, m in samples])
    weak = np.array([derive_weak_label(m) for _, m in samples], dtype=np.int64)
    return PatchSet(images, masks, weak)


def _check_distinct(source: SyntheticDomainSpec, target: SyntheticDomainSpec) -> None:
    a = dataclasses.replace(source, seed=0)
    b = dataclasses.replace(target, seed=0)
    if a == b:
        raise ContractError("source and target specs are identical: there is no domain gap")


def write_domain(out_dir, spec: SyntheticDomainSpec, counts: dict[str, int], workers: int = 1) -> Path:
    out = Path(out_dir)
    rows = []
    for split in SPLITS:
        n = counts.get(split, 0)
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, (img, mask) in enumerate(generate_split(spec, split, n, workers)):
            name = f"{split}/{i:05d}"
            write_ppm(out / f"{name}.ppm", img)
            write_pgm(out / f"{name}_mask.pgm", mask)
            rows.append(ManifestRow(f"{name}.ppm", split, derive_weak_label(mask), f"{name}_mask.pgm"))
    (out / "spec.txt").write_text(spec.to_text(), encoding="utf-8")
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def synth_generate(source: SyntheticDomainSpec, target: SyntheticDomainSpec, counts: dict[str, int],
                   out_dir, workers: int = 1) -> tuple[Path, Path]:
    """Write ``source/`` and ``target/`` patch trees with manifests; returns the two manifest paths."""
    _check_distinct(source, target)
    out = Path(out_dir)
    return (write_domain(out / "source", source, counts, workers),
            write_domain(out / "target", target, counts, workers))
