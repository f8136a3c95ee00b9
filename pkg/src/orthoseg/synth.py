"""Synthetic vineyard fields for desk-scale experiments.

A field is a set of parallel vine rows at a compass azimuth (0 = rows run
north-south, i.e. vertically in the image; 90 = east-west). Canopy width is
modulated along the row with period ``plant_spacing`` so individual plants
show up as bulges. Optional weed blobs between the rows carry vine-like
intensities but label 0, which is what makes pure intensity thresholding
fall short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .raster import BandId, DatasetManifest, PlotEntry, RasterStack, parse_bands, save_raster

# (vine_mean, soil_mean, noise_std) per band, reflectance-like units
DEFAULT_PROFILE: dict[str, tuple[float, float, float]] = {
    "B": (0.20, 0.25, 0.1),
    "G": (0.35, 0.30, 0.1),
    "R": (0.25, 0.35, 0.1),
    "RE": (0.50, 0.40, 0.1),
    "NIR": (0.70, 0.40, 0.1),
}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticFieldSpec:
    width: int = 480
    height: int = 480
    row_azimuth: float = 30.0
    row_spacing: float = 40.0
    plant_spacing: float = 24.0
    canopy_width: float = 12.0
    band_profile: dict = field(default_factory=lambda: dict(DEFAULT_PROFILE))
    weed_density: float = 0.0
    weed_radius: tuple[float, float] = (2.0, 5.0)
    row_offset: float = 0.0
    gsd: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise SynthError("field must be at least 1x1")
        if self.row_spacing <= self.canopy_width:
            raise SynthError("row_spacing must exceed canopy_width")
        if self.canopy_width <= 0 or self.plant_spacing <= 0:
            raise SynthError("canopy_width and plant_spacing must be positive")
        if not 0.0 <= self.weed_density <= 1.0:
            raise SynthError("weed_density must lie in [0, 1]")
        if not self.band_profile:
            raise SynthError("band_profile is empty")
        for name, prof in self.band_profile.items():
            BandId.parse(name)
            vine, soil, noise = prof
            if noise < 0:
                raise SynthError(f"negative noise for band {name}")
            if not (0.0 <= vine <= 1.0 and 0.0 <= soil <= 1.0):
                raise SynthError(f"band {name} means must lie in [0, 1]")

    @property
    def bands(self) -> list[BandId]:
        return parse_bands(list(self.band_profile))

    def with_noise(self, noise_std: float) -> "SyntheticFieldSpec":
        prof = {k: (v[0], v[1], noise_std) for k, v in self.band_profile.items()}
        return replace(self, band_profile=prof)


def _row_geometry(spec: SyntheticFieldSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = math.radians(spec.row_azimuth)
    across = cols * math.cos(theta) + rows * math.sin(theta)
    along = -cols * math.sin(theta) + rows * math.cos(theta)
    d = np.mod(across - spec.row_offset, spec.row_spacing)
    d = np.minimum(d, spec.row_spacing - d)
    half = 0.5 * spec.canopy_width * (0.8 + 0.2 * np.cos(2 * math.pi * along / spec.plant_spacing))
    return d < half


def _weeds(spec: SyntheticFieldSpec, vine: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    weeds = np.zeros_like(vine)
    if spec.weed_density <= 0:
        return weeds
    soil_area = float((~vine).sum())
    rmin, rmax = spec.weed_radius
    mean_area = math.pi * (rmin**2 + rmin * rmax + rmax**2) / 3.0
    n_blobs = rng.poisson(spec.weed_density * soil_area / mean_area)
    h, w = vine.shape
    ys = rng.uniform(0, h, n_blobs)
    xs = rng.uniform(0, w, n_blobs)
    rs = rng.uniform(rmin, rmax, n_blobs)
    for y, x, r in zip(ys, xs, rs):
        r0, r1 = max(0, int(y - r)), min(h, int(y + r) + 1)
        c0, c1 = max(0, int(x - r)), min(w, int(x + r) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        weeds[r0:r1, c0:c1] |= (yy - y) ** 2 + (xx - x) ** 2 <= r * r
    return weeds & ~vine


def generate_field(spec: SyntheticFieldSpec) -> tuple[RasterStack, RasterStack]:
    """Render ``(image, mask)`` for one synthetic plot."""
    rng = np.random.default_rng(spec.seed)
    vine = _row_geometry(spec)
    weeds = _weeds(spec, vine, rng)
    green = vine | weeds
    planes = []
    for name, (vine_mean, soil_mean, noise) in spec.band_profile.items():
        plane = np.where(green, vine_mean, soil_mean)
        if noise > 0:
            plane = plane + rng.normal(0.0, noise, plane.shape)
        planes.append(plane.astype(np.float32))
    gt = (0.0, spec.gsd, 0.0, 0.0, 0.0, -spec.gsd)
    image = RasterStack.from_array(np.stack(planes), spec.bands, geo_transform=gt)
    mask = RasterStack.from_array(vine.astype(np.float32), [BandId.MASK], geo_transform=gt)
    return image, mask


def spec_from_dict(d: dict) -> SyntheticFieldSpec:
    """Build a spec from a parsed TOML table.

    A top-level ``noise_std`` overrides the per-band noise of the profile;
    ``bands`` restricts the default profile to a subset.
    """
    d = dict(d)
    d.pop("plots", None)
    noise = d.pop("noise_std", None)
    bands = d.pop("bands", None)
    profile = d.pop("band_profile", None)
    if profile is None:
        profile = dict(DEFAULT_PROFILE)
        if bands:
            profile = {b: DEFAULT_PROFILE[BandId.parse(b).value] for b in bands}
    else:
        profile = {k: tuple(float(x) for x in v) for k, v in profile.items()}
    if "weed_radius" in d:
        d["weed_radius"] = tuple(d["weed_radius"])
    known = SyntheticFieldSpec.__dataclass_fields__
    unknown = set(d) - set(known)
    if unknown:
        raise SynthError(f"unknown field spec keys {sorted(unknown)}")
    spec = SyntheticFieldSpec(band_profile=profile, **d)
    if noise is not None:
        spec = spec.with_noise(float(noise))
    return spec


def write_dataset(
    spec: SyntheticFieldSpec,
    out_dir: "str | Path",
    plots: Optional[list[str]] = None,
    tile_size: int = 240,
    suffix: str = ".tif",
) -> DatasetManifest:
    """Generate one field per plot name (distinct seeds and row phases) and a manifest."""
    out_dir = Path(out_dir)
    plots = plots or [out_dir.name or "plot"]
    entries = []
    for k, name in enumerate(plots):
        plot_spec = replace(
            spec,
            seed=spec.seed + 1009 * k,
            row_offset=spec.row_offset + 0.37 * k * spec.row_spacing,
        )
        image, mask = generate_field(plot_spec)
        img_path = save_raster(image, out_dir / name / f"image{suffix}")
        msk_path = save_raster(mask, out_dir / name / f"mask{suffix}")
        entries.append(
            PlotEntry(name, img_path.resolve(), msk_path.resolve(), "MS", tuple(spec.bands))
        )
    manifest = DatasetManifest(tuple(entries), tile_size, out_dir.resolve())
    manifest.save(out_dir / "manifest.json")
    return manifest
