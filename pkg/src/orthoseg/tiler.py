"""Split orthomosaics into fixed-size tiles and rebuild full-size masks.

Tiling starts at the top-left corner, walks right in steps of the tile size,
then moves one tile down. Partial tiles on the right/bottom edges are padded
with zeros and carry a validity grid so rebuilt masks can drop the padding.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .raster import BandId, RasterError, RasterStack, load_raster, save_raster

TILE_NAME = re.compile(r"tile_r(\d+)_c(\d+)")


class TilingError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TileIndex:
    row_origin: int
    col_origin: int

    @property
    def name(self) -> str:
        return f"tile_r{self.row_origin}_c{self.col_origin}"


@dataclass(frozen=True)
class Tile:
    index: TileIndex
    data: np.ndarray  # (bands, S, S) float32
    valid: np.ndarray  # (S, S) bool
    band_ids: tuple[BandId, ...] = ()

    @property
    def size(self) -> int:
        return self.data.shape[-1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def band(self, band_id: BandId) -> np.ndarray:
        return self.data[self.band_ids.index(band_id)]

    def replace(self, data: np.ndarray | None = None, valid: np.ndarray | None = None,
                band_ids: Sequence[BandId] | None = None) -> "Tile":
        return Tile(
            self.index,
            self.data if data is None else data,
            self.valid if valid is None else valid,
            self.band_ids if band_ids is None else tuple(band_ids),
        )


@dataclass(frozen=True)
class TileGrid:
    parent_width: int
    parent_height: int
    tile_size: int
    tiles: tuple[Tile, ...]

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self) -> Iterator[Tile]:
        return iter(self.tiles)

    @property
    def shape(self) -> tuple[int, int]:
        """Number of tile rows and tile columns."""
        s = self.tile_size
        return -(-self.parent_height // s), -(-self.parent_width // s)

    def same_layout(self, other: "TileGrid") -> bool:
        return (
            self.parent_width == other.parent_width
            and self.parent_height == other.parent_height
            and self.tile_size == other.tile_size
            and [t.index for t in self.tiles] == [t.index for t in other.tiles]
        )


def tile_origins(width: int, height: int, tile_size: int) -> list[TileIndex]:
    """Row-major tile origins covering a ``width`` x ``height`` raster."""
    if tile_size < 1:
        raise TilingError("zero tile size")
    return [
        TileIndex(r, c)
        for r in range(0, height, tile_size)
        for c in range(0, width, tile_size)
    ]


def split_array(
    data: np.ndarray, tile_size: int, valid: np.ndarray | None = None
) -> list[tuple[TileIndex, np.ndarray, np.ndarray]]:
    """Tile a ``(bands, H, W)`` array; ``valid`` optionally masks nodata."""
    if data.ndim != 3:
        raise TilingError(f"expected (bands, H, W) array, got {data.shape}")
    _, height, width = data.shape
    if width < 1 or height < 1:
        raise TilingError("empty raster")
    s = tile_size
    out = []
    for idx in tile_origins(width, height, s):
        r, c = idx.row_origin, idx.col_origin
        h = min(s, height - r)
        w = min(s, width - c)
        block = np.zeros((data.shape[0], s, s), dtype=np.float32)
        block[:, :h, :w] = data[:, r : r + h, c : c + w]
        ok = np.zeros((s, s), dtype=bool)
        ok[:h, :w] = True if valid is None else valid[r : r + h, c : c + w]
        block[:, ~ok] = 0.0
        out.append((idx, block, ok))
    return out


def split(raster: RasterStack, tile_size: int) -> TileGrid:
    """Cut ``raster`` into ``ceil(H/S) * ceil(W/S)`` tiles in row-major order.

    Nodata pixels and padding are both flagged invalid and hold 0.
    """
    if tile_size < 1:
        raise TilingError("zero tile size")
    raster.require_aligned()
    data = raster.to_array()
    valid = raster.valid_mask() if raster.nodata else None
    ids = tuple(raster.band_ids)
    tiles = tuple(
        Tile(idx, block, ok, ids) for idx, block, ok in split_array(data, tile_size, valid)
    )
    return TileGrid(raster.width, raster.height, tile_size, tiles)


def rebuild(
    grid: TileGrid, sub_masks: Sequence[np.ndarray], geo_transform=None
) -> RasterStack:
    """Assemble per-tile ``(S, S)`` masks into a parent-sized MASK raster."""
    if len(sub_masks) != len(grid.tiles):
        raise TilingError(
            f"length mismatch: {len(sub_masks)} sub-masks for {len(grid.tiles)} tiles"
        )
    s = grid.tile_size
    out = np.zeros((grid.parent_height, grid.parent_width), dtype=np.float32)
    for tile, sub in zip(grid.tiles, sub_masks):
        sub = np.asarray(sub)
        if sub.shape != (s, s):
            raise TilingError(f"sub-mask dimension mismatch: {sub.shape} != {(s, s)}")
        r, c = tile.index.row_origin, tile.index.col_origin
        h = min(s, grid.parent_height - r)
        w = min(s, grid.parent_width - c)
        out[r : r + h, c : c + w] = sub[:h, :w]
    return RasterStack.from_array(out, [BandId.MASK], geo_transform=geo_transform)


def mask_tiles(mask: RasterStack, tile_size: int) -> TileGrid:
    """Split a MASK raster with nodata mapped to class 0 and kept invalid."""
    binary = mask.binary_mask().astype(np.float32)[None]
    valid = mask.valid_mask([BandId.MASK]) if mask.nodata else None
    tiles = tuple(
        Tile(idx, block, ok, (BandId.MASK,))
        for idx, block, ok in split_array(binary, tile_size, valid)
    )
    return TileGrid(mask.width, mask.height, tile_size, tiles)


def filter_training_tiles(
    image_tiles: TileGrid, mask_tiles: TileGrid
) -> list[tuple[Tile, Tile]]:
    """Keep the (image, mask) pairs whose mask holds at least one valid vine pixel."""
    if not image_tiles.same_layout(mask_tiles):
        raise TilingError("grid mismatch between image and mask tiles")
    kept = []
    for img, msk in zip(image_tiles.tiles, mask_tiles.tiles):
        if np.any((msk.data[0] == 1) & msk.valid):
            kept.append((img, msk))
    return kept


def save_tiles(grid: TileGrid, out_dir: "str | Path", prefix: str = "") -> list[Path]:
    """Write each tile as a raw sidecar pair named ``tile_r<row>_c<col>``.

    Invalid (padding) pixels are written as NaN nodata so a reader can
    recover the validity grid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in grid.tiles:
        data = t.data.copy()
        nodata = None
        if not t.valid.all():
            data[:, ~t.valid] = np.nan
            nodata = {b: float("nan") for b in t.band_ids}
        stack = RasterStack.from_array(data, t.band_ids, nodata=nodata)
        paths.append(save_raster(stack, out_dir / f"{prefix}{t.index.name}.hdr"))
    return paths


def load_tile(path: "str | Path") -> Tile:
    path = Path(path)
    m = TILE_NAME.search(path.stem)
    if m is None:
        raise RasterError(f"{path} is not named tile_r<row>_c<col>")
    stack = load_raster(path)
    valid = stack.valid_mask()
    data = np.where(valid[None], stack.to_array(), 0.0).astype(np.float32)
    return Tile(TileIndex(int(m.group(1)), int(m.group(2))), data, valid, tuple(stack.band_ids))
