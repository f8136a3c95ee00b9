"""Full-raster inference: split, prepare tiles, predict sub-masks, rebuild."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .metrics import ConfusionCounts, confusion
from .nets import NetworkConfig, Parameters, predict_masks
from .preprocess import BandSelection, select_bands, standardize
from .raster import RasterStack
from .tiler import Tile, rebuild, split


def prepare_tile(tile: Tile, bands: BandSelection) -> Tile:
    """Band selection followed by per-tile standardization."""
    return standardize(select_bands(tile, bands))


def predict_raster(
    params: Parameters,
    cfg: NetworkConfig,
    raster: RasterStack,
    bands: "BandSelection | Sequence[str]",
    tile_size: int,
    threshold: float = 0.5,
    batch_size: int = 4,
) -> RasterStack:
    """Predict a mask with the same size and geo transform as ``raster``."""
    if not isinstance(bands, BandSelection):
        bands = BandSelection.of(bands)
    cfg.check_tile_size(tile_size)
    grid = split(raster, tile_size)
    live = [k for k, t in enumerate(grid.tiles) if t.n_valid]
    prepared = [prepare_tile(grid.tiles[k], bands) for k in live]
    preds = predict_masks(params, cfg, prepared, batch_size, threshold)
    masks = [np.zeros((tile_size, tile_size), dtype=np.uint8) for _ in grid.tiles]
    for k, p, t in zip(live, preds, prepared):
        masks[k] = np.where(t.valid, p, 0).astype(np.uint8)
    return rebuild(grid, masks, geo_transform=raster.geo_transform)


def evaluate_raster(
    params: Parameters,
    cfg: NetworkConfig,
    image: RasterStack,
    mask: RasterStack,
    bands: "BandSelection | Sequence[str]",
    tile_size: int,
    threshold: float = 0.5,
) -> ConfusionCounts:
    pred = predict_raster(params, cfg, image, bands, tile_size, threshold)
    valid = image.valid_mask() & mask.valid_mask()
    return confusion(pred.binary_mask(), mask.binary_mask(), valid)
