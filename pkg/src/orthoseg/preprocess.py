"""Band selection, per-tile standardization and training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raster import BandId, parse_bands
from .tiler import Tile

COLOR_TRIPLES = (
    (BandId.R, BandId.G, BandId.B),
    (BandId.HD_R, BandId.HD_G, BandId.HD_B),
)


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class BandSelection:
    bands: tuple[BandId, ...]

    def __post_init__(self) -> None:
        if not self.bands:
            raise PreprocessError("band selection is empty")
        if len(set(self.bands)) != len(self.bands):
            raise PreprocessError(f"duplicate bands in selection {self.label}")

    @classmethod
    def of(cls, bands: Sequence["str | BandId"]) -> "BandSelection":
        return cls(tuple(parse_bands(bands)))

    @property
    def label(self) -> str:
        return "+".join(b.value for b in self.bands)

    def __len__(self) -> int:
        return len(self.bands)

    def color_triple(self) -> tuple[BandId, BandId, BandId] | None:
        for triple in COLOR_TRIPLES:
            if all(b in self.bands for b in triple):
                return triple
        return None


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_max_deg: float = 180.0
    flip_horizontal: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise PreprocessError("rotation_max_deg must lie in [0, 180]")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise PreprocessError(f"{name} jitter must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0.0, False, 0.0, 0.0, 0.0, 0.0)


def standardize(tile: Tile) -> Tile:
    """Per-band ``(x - mean) / std`` over the valid pixels of one tile.

    Uses the population standard deviation. A constant band maps to zeros;
    invalid pixels are set to 0.
    """
    valid = tile.valid
    n = int(valid.sum())
    if n == 0:
        raise PreprocessError("tile has no valid pixels")
    out = np.zeros_like(tile.data, dtype=np.float32)
    for b in range(tile.data.shape[0]):
        vals = tile.data[b][valid].astype(np.float64)
        if vals.max() == vals.min():
            continue
        mu = vals.mean()
        sigma = np.sqrt(np.mean((vals - mu) ** 2))
        out[b][valid] = ((vals - mu) / sigma).astype(np.float32)
    return tile.replace(data=out)


def select_bands(tile: Tile, sel: BandSelection) -> Tile:
    missing = [b.value for b in sel.bands if b not in tile.band_ids]
    if missing:
        raise PreprocessError(f"missing band {', '.join(missing)}")
    order = [tile.band_ids.index(b) for b in sel.bands]
    return tile.replace(data=tile.data[order].copy(), band_ids=sel.bands)


# ------------------------------------------------------------------ geometry


def _rotate_plane(plane: np.ndarray, angle_deg: float, fill) -> np.ndarray:
    """Rotate counter-clockwise about the tile centre, nearest neighbour."""
    quarter = angle_deg / 90.0
    if abs(quarter - round(quarter)) < 1e-12:
        return np.rot90(plane, k=int(round(quarter)) % 4).copy()
    h, w = plane.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    # inverse map: output (y, x) samples source at R(-theta) applied in image coords
    src_x = cos * dx - sin * dy + cx
    src_y = sin * dx + cos * dy + cy
    sx = np.rint(src_x).astype(np.int64)
    sy = np.rint(src_y).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.full_like(plane, fill)
    out[inside] = plane[sy[inside], sx[inside]]
    return out


def transform_tile(tile: Tile, angle: float, flip: bool = False) -> Tile:
    """Rotate by ``angle`` degrees (counter-clockwise) then optionally mirror columns."""
    data = np.stack([_rotate_plane(p, angle, 0) for p in tile.data])
    valid = _rotate_plane(tile.valid, angle, False)
    if flip:
        data = data[:, :, ::-1].copy()
        valid = valid[:, ::-1].copy()
    data[:, ~valid] = 0
    return tile.replace(data=data.astype(tile.data.dtype), valid=valid)


# --------------------------------------------------------------------- color


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    from matplotlib.colors import rgb_to_hsv

    return rgb_to_hsv(rgb)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(hsv)


def _color_jitter(tile: Tile, cfg: AugmentationConfig, rng: np.random.Generator) -> Tile:
    data = tile.data.astype(np.float64)
    valid = tile.valid
    if not valid.any():
        return tile
    nb = data.shape[0]
    shift = rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness else 0.0
    scale = 1.0 + (rng.uniform(-cfg.contrast, cfg.contrast) if cfg.contrast else 0.0)
    for b in range(nb):
        vals = data[b][valid]
        span = vals.max() - vals.min()
        mean = vals.mean()
        data[b][valid] = mean + scale * (vals - mean) + shift * span

    triple = BandSelection(tile.band_ids).color_triple() if tile.band_ids else None
    if triple is not None and (cfg.saturation or cfg.hue):
        sat = 1.0 + (rng.uniform(-cfg.saturation, cfg.saturation) if cfg.saturation else 0.0)
        hue = rng.uniform(-cfg.hue, cfg.hue) if cfg.hue else 0.0
        idx = [tile.band_ids.index(b) for b in triple]
        rgb = np.stack([data[i][valid] for i in idx], axis=-1)
        lo, hi = rgb.min(), rgb.max()
        if hi > lo:
            unit = (rgb - lo) / (hi - lo)
            hsv = _rgb_to_hsv(unit)
            hsv[:, 0] = np.mod(hsv[:, 0] + hue, 1.0)
            hsv[:, 1] = np.clip(hsv[:, 1] * sat, 0.0, 1.0)
            rgb = _hsv_to_rgb(hsv) * (hi - lo) + lo
            for k, i in enumerate(idx):
                data[i][valid] = rgb[:, k]
    data[:, ~valid] = 0.0
    return tile.replace(data=data.astype(np.float32))


def augment(
    image_tile: Tile,
    mask_tile: Tile,
    cfg: AugmentationConfig,
    draw: np.random.Generator,
) -> tuple[Tile, Tile]:
    """Random rotation/flip applied to both tiles, color jitter to the image only."""
    if image_tile.size != mask_tile.size:
        raise PreprocessError("image and mask tiles differ in size")
    angle = draw.uniform(0.0, cfg.rotation_max_deg) if cfg.rotation_max_deg > 0 else 0.0
    flip = bool(cfg.flip_horizontal and draw.random() < 0.5)
    if angle != 0.0 or flip:
        image_tile = transform_tile(image_tile, angle, flip)
        mask_tile = transform_tile(mask_tile, angle, flip)
        both = image_tile.valid & mask_tile.valid
        image_tile = image_tile.replace(data=np.where(both, image_tile.data, 0), valid=both)
        mask_tile = mask_tile.replace(data=np.where(both, mask_tile.data, 0), valid=both)
    if cfg.brightness or cfg.contrast or cfg.saturation or cfg.hue:
        image_tile = _color_jitter(image_tile, cfg, draw)
    return image_tile, mask_tile
