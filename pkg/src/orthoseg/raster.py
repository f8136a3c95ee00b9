"""Multi-band raster ingestion, resampling, writing and dataset manifests.

Two on-disk encodings are supported:

* GeoTIFF (``.tif``/``.tiff``), read and written through ``tifffile``. The
  affine transform is stored in the ModelPixelScale/ModelTiepoint tags and the
  band identities in a JSON image description.
* A raw sidecar pair: ``<name>.hdr`` (UTF-8 ``key=value`` lines with ``width``,
  ``height``, ``bands``, ``band_ids``, ``nodata``) and ``<name>.raw`` holding
  row-major, band-sequential little-endian float32 planes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from .tiler import TileGrid

MAX_DIM = 1 << 20

GEOTIFF_SUFFIXES = (".tif", ".tiff")
RAW_SUFFIXES = (".hdr", ".raw")


class RasterError(ValueError):
    """Raised for unreadable, malformed or inconsistent rasters."""


class BandId(str, enum.Enum):
    B = "B"
    G = "G"
    R = "R"
    RE = "RE"
    NIR = "NIR"
    TH = "TH"
    HD_R = "HD_R"
    HD_G = "HD_G"
    HD_B = "HD_B"
    MASK = "MASK"

    @classmethod
    def parse(cls, value: "str | BandId") -> "BandId":
        if isinstance(value, BandId):
            return value
        try:
            return cls(value.strip().upper())
        except ValueError:
            raise RasterError(f"unknown band id {value!r}") from None


MS_BANDS = (BandId.B, BandId.G, BandId.R, BandId.RE, BandId.NIR)
HD_BANDS = (BandId.HD_R, BandId.HD_G, BandId.HD_B)


def parse_bands(values: Sequence["str | BandId"]) -> list[BandId]:
    return [BandId.parse(v) for v in values]


@dataclass(frozen=True)
class RasterStack:
    """Ordered stack of float32 band grids.

    ``width``/``height`` describe the stack grid. A freshly resampled band may
    temporarily live on a smaller grid; :func:`align_bands` (applied by
    :func:`load_raster`) restores the one-grid invariant.

    ``geo_transform`` follows the GDAL convention
    ``(x0, pixel_w, row_rot, y0, col_rot, pixel_h)``.
    """

    width: int
    height: int
    bands: tuple[tuple[BandId, np.ndarray], ...]
    geo_transform: Optional[tuple[float, ...]] = None
    nodata: Optional[dict[BandId, float]] = None

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise RasterError(f"empty raster {self.width}x{self.height}")
        if self.width > MAX_DIM or self.height > MAX_DIM:
            raise RasterError(f"dimension overflow {self.width}x{self.height}")
        seen = set()
        for band_id, grid in self.bands:
            if band_id in seen:
                raise RasterError(f"duplicate band {band_id.value}")
            seen.add(band_id)
            if grid.ndim != 2 or grid.shape[0] > self.height or grid.shape[1] > self.width:
                raise RasterError(
                    f"band {band_id.value} has shape {grid.shape}, "
                    f"expected at most {(self.height, self.width)}"
                )
            if grid.dtype != np.float32:
                raise RasterError(f"band {band_id.value} is {grid.dtype}, expected float32")
            grid.setflags(write=False)
        if self.geo_transform is not None and len(self.geo_transform) != 6:
            raise RasterError("geo_transform needs 6 coefficients")

    @classmethod
    def from_array(
        cls,
        data: np.ndarray,
        band_ids: Sequence["str | BandId"],
        geo_transform: Optional[Sequence[float]] = None,
        nodata: Optional[dict] = None,
    ) -> "RasterStack":
        data = np.asarray(data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] != len(band_ids):
            raise RasterError(
                f"array of shape {data.shape} does not match {len(band_ids)} band ids"
            )
        ids = parse_bands(band_ids)
        bands = tuple(
            (b, np.array(data[i], dtype=np.float32, copy=True)) for i, b in enumerate(ids)
        )
        nd = None if nodata is None else {BandId.parse(k): float(v) for k, v in nodata.items()}
        gt = None if geo_transform is None else tuple(float(v) for v in geo_transform)
        return cls(data.shape[2], data.shape[1], bands, gt, nd)

    @property
    def band_ids(self) -> list[BandId]:
        return [b for b, _ in self.bands]

    @property
    def aligned(self) -> bool:
        return all(g.shape == (self.height, self.width) for _, g in self.bands)

    def require_aligned(self) -> "RasterStack":
        if not self.aligned:
            raise RasterError("bands live on different grids; call align_bands first")
        return self

    def band(self, band_id: "str | BandId") -> np.ndarray:
        band_id = BandId.parse(band_id)
        for b, grid in self.bands:
            if b == band_id:
                return grid
        raise RasterError(f"missing band {band_id.value}")

    def has_band(self, band_id: "str | BandId") -> bool:
        return BandId.parse(band_id) in self.band_ids

    def to_array(self, band_ids: Optional[Sequence["str | BandId"]] = None) -> np.ndarray:
        """Return a ``(bands, height, width)`` float32 copy."""
        self.require_aligned()
        ids = self.band_ids if band_ids is None else parse_bands(band_ids)
        return np.stack([self.band(b) for b in ids]).astype(np.float32, copy=True)

    def nodata_for(self, band_id: BandId) -> Optional[float]:
        if not self.nodata:
            return None
        return self.nodata.get(band_id)

    def valid_mask(self, band_ids: Optional[Sequence[BandId]] = None) -> np.ndarray:
        """Pixels that are not nodata in any of the given bands."""
        ids = self.band_ids if band_ids is None else parse_bands(band_ids)
        valid = np.ones((self.height, self.width), dtype=bool)
        for b in ids:
            nd = self.nodata_for(b)
            grid = self.band(b)
            if nd is not None:
                valid &= ~(grid == nd) if not math.isnan(nd) else ~np.isnan(grid)
        return valid

    def binary_mask(self) -> np.ndarray:
        """The MASK band as uint8 {0, 1} with nodata mapped to 0."""
        grid = self.band(BandId.MASK)
        valid = self.valid_mask([BandId.MASK])
        return ((grid == 1) & valid).astype(np.uint8)


def _check_values(stack: RasterStack) -> None:
    for b, grid in stack.bands:
        vals = grid[stack.valid_mask([b])]
        if not np.isfinite(vals).all():
            raise RasterError(f"band {b.value} holds non-finite values")
        if b == BandId.MASK and not np.isin(vals, (0.0, 1.0)).all():
            raise RasterError("MASK band must contain only 0, 1 or nodata")


# --------------------------------------------------------------------------- io


def _is_raw(path: Path) -> bool:
    return path.suffix.lower() in RAW_SUFFIXES


def _raw_pair(path: Path) -> tuple[Path, Path]:
    base = path.with_suffix("")
    return base.with_suffix(".hdr"), base.with_suffix(".raw")


def _read_raw(path: Path) -> tuple[np.ndarray, list[BandId] | None, dict]:
    hdr_path, raw_path = _raw_pair(path)
    if not hdr_path.exists() or not raw_path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    header: dict[str, str] = {}
    for line in hdr_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RasterError(f"corrupt header line {line!r} in {hdr_path}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    try:
        width = int(header["width"])
        height = int(header["height"])
        nbands = int(header["bands"])
    except (KeyError, ValueError) as exc:
        raise RasterError(f"corrupt header {hdr_path}: {exc}") from None
    if width < 1 or height < 1 or nbands < 1:
        raise RasterError(f"invalid dimensions in {hdr_path}")
    if width > MAX_DIM or height > MAX_DIM or width * height * nbands > (1 << 34):
        raise RasterError(f"dimension overflow in {hdr_path}")
    ids = None
    if header.get("band_ids"):
        ids = parse_bands([s for s in header["band_ids"].split(",") if s.strip()])
    meta: dict = {}
    if header.get("nodata") not in (None, "", "none", "None"):
        meta["nodata"] = float(header["nodata"])
    if header.get("geo_transform"):
        meta["geo_transform"] = tuple(float(v) for v in header["geo_transform"].split(","))
    expected = width * height * nbands * 4
    if raw_path.stat().st_size != expected:
        raise RasterError(
            f"corrupt raster {raw_path}: {raw_path.stat().st_size} bytes, expected {expected}"
        )
    data = np.fromfile(raw_path, dtype="<f4").reshape(nbands, height, width)
    return data.astype(np.float32), ids, meta


def _write_raw(path: Path, stack: RasterStack) -> None:
    hdr_path, raw_path = _raw_pair(path)
    nodata_values = {repr(float(v)) for v in (stack.nodata or {}).values()}
    if len(nodata_values) > 1:
        raise RasterError("raw format stores a single nodata value for all bands")
    lines = [
        f"width={stack.width}",
        f"height={stack.height}",
        f"bands={len(stack.bands)}",
        "band_ids=" + ",".join(b.value for b in stack.band_ids),
        "nodata=" + (next(iter(nodata_values)) if nodata_values else ""),
    ]
    if stack.geo_transform is not None:
        lines.append("geo_transform=" + ",".join(repr(v) for v in stack.geo_transform))
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    hdr_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    stack.to_array().astype("<f4").tofile(raw_path)


_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_TRANSFORMATION = 34264
_TAG_GEOKEYS = 34735
_TAG_GDAL_NODATA = 42113


def _read_geotiff(path: Path) -> tuple[np.ndarray, list[BandId] | None, dict]:
    import tifffile

    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    try:
        with tifffile.TiffFile(path) as tif:
            series = tif.series[0]
            data = series.asarray()
            axes = series.axes
            page = tif.pages[0]
            tags = {t.code: t.value for t in page.tags.values()}
    except (tifffile.TiffFileError, ValueError, OSError) as exc:
        raise RasterError(f"unreadable raster {path}: {exc}") from None

    if data.ndim == 2:
        data = data[None]
    elif data.ndim == 3:
        if axes.endswith("S") or (axes[-1] not in "X" and axes[0] in "YX"):
            data = np.moveaxis(data, -1, 0)
    else:
        raise RasterError(f"unsupported raster layout {axes} in {path}")
    if data.shape[1] > MAX_DIM or data.shape[2] > MAX_DIM:
        raise RasterError(f"dimension overflow in {path}")

    meta: dict = {}
    ids = None
    desc = tags.get(270)
    if isinstance(desc, str) and desc.startswith("{"):
        try:
            info = json.loads(desc)
        except json.JSONDecodeError:
            info = {}
        if isinstance(info, dict) and info.get("band_ids"):
            ids = parse_bands(info["band_ids"])
    if _TAG_GDAL_NODATA in tags:
        try:
            meta["nodata"] = float(str(tags[_TAG_GDAL_NODATA]).strip("\x00 "))
        except ValueError:
            pass
    if _TAG_TRANSFORMATION in tags:
        m = tags[_TAG_TRANSFORMATION]
        meta["geo_transform"] = (m[3], m[0], m[1], m[7], m[4], m[5])
    elif _TAG_PIXEL_SCALE in tags and _TAG_TIEPOINT in tags:
        sx, sy = tags[_TAG_PIXEL_SCALE][:2]
        i, j, _, x, y, _ = tags[_TAG_TIEPOINT][:6]
        meta["geo_transform"] = (x - i * sx, sx, 0.0, y + j * sy, 0.0, -sy)

    if np.issubdtype(data.dtype, np.integer) and data.size and np.abs(data).max() > 2**24:
        raise RasterError(f"integer values in {path} exceed float32 exact range")
    return data.astype(np.float32), ids, meta


def _write_geotiff(path: Path, stack: RasterStack) -> None:
    import tifffile

    extratags = []
    gt = stack.geo_transform
    if gt is not None:
        if gt[2] == 0.0 and gt[4] == 0.0:
            extratags.append((_TAG_PIXEL_SCALE, "d", 3, (gt[1], -gt[5], 0.0), True))
            extratags.append((_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, gt[0], gt[3], 0.0), True))
        else:
            matrix = (gt[1], gt[2], 0.0, gt[0], gt[4], gt[5], 0.0, gt[3],
                      0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
            extratags.append((_TAG_TRANSFORMATION, "d", 16, matrix, True))
        # GTModelType=projected, GTRasterType=PixelIsArea; no CRS is asserted
        geokeys = (1, 1, 0, 2, 1024, 0, 1, 1, 1025, 0, 1, 1)
        extratags.append((_TAG_GEOKEYS, "H", len(geokeys), geokeys, True))
    nodata_values = {repr(float(v)) for v in (stack.nodata or {}).values()}
    if len(nodata_values) > 1:
        raise RasterError("GeoTIFF stores a single nodata value for all bands")
    if nodata_values:
        extratags.append((_TAG_GDAL_NODATA, "s", 0, next(iter(nodata_values)), True))
    description = json.dumps({"band_ids": [b.value for b in stack.band_ids]})
    path.parent.mkdir(parents=True, exist_ok=True)
    data = stack.to_array()
    tifffile.imwrite(
        path,
        data,
        photometric="minisblack",
        # tifffile rejects a planar layout for single-sample images
        planarconfig="separate" if data.shape[0] > 1 else None,
        description=description,
        metadata=None,
        extratags=extratags,
    )


def save_raster(stack: RasterStack, path: "str | Path") -> Path:
    """Write ``stack`` as GeoTIFF or raw sidecar depending on the suffix."""
    path = Path(path)
    if _is_raw(path):
        _write_raw(path, stack)
    elif path.suffix.lower() in GEOTIFF_SUFFIXES:
        _write_geotiff(path, stack)
    else:
        raise RasterError(f"unsupported raster suffix {path.suffix!r}")
    return path


def load_raster(
    path: "str | Path",
    expected_bands: Optional[Sequence["str | BandId"]] = None,
) -> RasterStack:
    """Read a raster and label its planes with ``expected_bands``.

    When ``expected_bands`` is omitted the identities stored in the file are
    used. All bands are brought onto the finest grid of the stack.
    """
    path = Path(path)
    if _is_raw(path):
        data, ids, meta = _read_raw(path)
    elif path.suffix.lower() in GEOTIFF_SUFFIXES:
        data, ids, meta = _read_geotiff(path)
    else:
        raise RasterError(f"unsupported raster suffix {path.suffix!r}")

    if expected_bands is not None:
        expected = parse_bands(expected_bands)
        if len(expected) != data.shape[0]:
            raise RasterError(
                f"band count mismatch: {path} has {data.shape[0]} bands, "
                f"expected {len(expected)}"
            )
        ids = expected
    elif ids is None or len(ids) != data.shape[0]:
        raise RasterError(f"{path} carries no band ids; pass expected_bands")

    nodata = meta.get("nodata")
    stack = RasterStack.from_array(
        data,
        ids,
        geo_transform=meta.get("geo_transform"),
        nodata=None if nodata is None else {b: nodata for b in ids},
    )
    _check_values(stack)
    return stack


def load_band_grids(
    paths: Sequence["str | Path"],
    expected: Sequence[Sequence["str | BandId"]],
) -> RasterStack:
    """Load several single- or multi-band files of possibly different
    resolutions and align them onto the finest grid."""
    parts = [load_raster(p, e) for p, e in zip(paths, expected)]
    width = max(p.width for p in parts)
    height = max(p.height for p in parts)
    bands: list[tuple[BandId, np.ndarray]] = []
    nodata: dict[BandId, float] = {}
    gt = None
    for p in parts:
        if (p.width, p.height) == (width, height) and gt is None:
            gt = p.geo_transform
        p = align_bands(p, width, height)
        bands.extend(p.bands)
        nodata.update(p.nodata or {})
    return RasterStack(width, height, tuple(bands), gt, nodata or None)


# ------------------------------------------------------------------ resampling


def _nearest_index(src: int, dst: int) -> np.ndarray:
    # pixel centre mapping: dst pixel i samples src pixel floor((i + 0.5) * src / dst)
    idx = ((2 * np.arange(dst, dtype=np.int64) + 1) * src) // (2 * dst)
    return np.minimum(idx, src - 1)


def resample_grid(grid: np.ndarray, target_width: int, target_height: int) -> np.ndarray:
    if target_width < 1 or target_height < 1:
        raise RasterError("zero target dimension")
    h, w = grid.shape
    if (w, h) == (target_width, target_height):
        return grid.copy()
    rows = _nearest_index(h, target_height)
    cols = _nearest_index(w, target_width)
    return grid[np.ix_(rows, cols)].astype(np.float32, copy=True)


def resample_to_grid(
    stack: RasterStack, band: "str | BandId", target_width: int, target_height: int
) -> RasterStack:
    """Nearest-neighbour resample one band; other bands are left untouched.

    If the target size differs from the other bands the result is not
    aligned until :func:`align_bands` is applied.
    """
    band = BandId.parse(band)
    new = resample_grid(stack.band(band), target_width, target_height)
    bands = tuple((b, new if b == band else g) for b, g in stack.bands)
    width = max(g.shape[1] for _, g in bands)
    height = max(g.shape[0] for _, g in bands)
    return RasterStack(width, height, bands, stack.geo_transform, stack.nodata)


def align_bands(stack: RasterStack, width: Optional[int] = None, height: Optional[int] = None) -> RasterStack:
    """Resample every band onto one grid (default: the finest in the stack)."""
    width = width or max(g.shape[1] for _, g in stack.bands)
    height = height or max(g.shape[0] for _, g in stack.bands)
    bands = tuple(
        (b, g if g.shape == (height, width) else resample_grid(g, width, height))
        for b, g in stack.bands
    )
    return RasterStack(width, height, bands, stack.geo_transform, stack.nodata)


# -------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class PlotEntry:
    plot_name: str
    raster_path: Path
    mask_path: Path
    modality: str = "MS"
    bands: Optional[tuple[BandId, ...]] = None

    def load(self) -> tuple[RasterStack, RasterStack]:
        image = load_raster(self.raster_path, self.bands)
        mask = load_raster(self.mask_path, [BandId.MASK])
        if (image.width, image.height) != (mask.width, mask.height):
            raise RasterError(
                f"plot {self.plot_name}: raster {image.width}x{image.height} "
                f"and mask {mask.width}x{mask.height} differ"
            )
        return image, mask


@dataclass(frozen=True)
class DatasetManifest:
    plots: tuple[PlotEntry, ...]
    tile_size: int = 240
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        names = [p.plot_name for p in self.plots]
        if len(set(names)) != len(names):
            raise RasterError(f"duplicate plot names in manifest: {names}")
        if self.tile_size < 1:
            raise RasterError("tile_size must be positive")

    def plot(self, name: str) -> PlotEntry:
        for p in self.plots:
            if p.plot_name == name:
                return p
        raise KeyError(f"unknown plot {name!r}")

    @property
    def plot_names(self) -> list[str]:
        return [p.plot_name for p in self.plots]

    def to_json(self) -> dict:
        def rel(p: Path) -> str:
            try:
                return str(p.relative_to(self.root))
            except ValueError:
                return str(p)

        return {
            "tile_size": self.tile_size,
            "plots": [
                {
                    "plot_name": p.plot_name,
                    "raster_path": rel(p.raster_path),
                    "mask_path": rel(p.mask_path),
                    "modality": p.modality,
                    **({"bands": [b.value for b in p.bands]} if p.bands else {}),
                }
                for p in self.plots
            ],
        }

    def save(self, path: "str | Path") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path


def _check_exists(path: Path) -> None:
    candidates = [path]
    if _is_raw(path):
        candidates = list(_raw_pair(path))
    for c in candidates:
        if not c.exists():
            raise FileNotFoundError(f"manifest references missing file {c}")


def load_manifest(path: "str | Path") -> DatasetManifest:
    """Parse a manifest JSON file; relative paths resolve against its folder."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    root = path.parent.resolve()
    plots = []
    for entry in doc.get("plots", []):
        modality = entry.get("modality", "MS").upper()
        if modality not in ("MS", "HD"):
            raise RasterError(f"unknown modality {modality!r}")
        raster = (root / entry["raster_path"]).resolve()
        mask = (root / entry["mask_path"]).resolve()
        _check_exists(raster)
        _check_exists(mask)
        bands = entry.get("bands")
        plots.append(
            PlotEntry(
                plot_name=entry["plot_name"],
                raster_path=raster,
                mask_path=mask,
                modality=modality,
                bands=tuple(parse_bands(bands)) if bands else None,
            )
        )
    if not plots:
        raise RasterError(f"manifest {path} lists no plots")
    return DatasetManifest(tuple(plots), int(doc.get("tile_size", 240)), root)


# -------------------------------------------------------------- statistics


@dataclass(frozen=True)
class ClassDistribution:
    positive_fraction: float
    negative_fraction: float
    tile_count: int


def class_distribution(mask: RasterStack, tiles: "TileGrid") -> ClassDistribution:
    """Positive/negative pixel fractions over the tiles that hold a vine pixel.

    Only valid (in-raster) pixels are counted; nodata counts as negative.
    """
    if (tiles.parent_width, tiles.parent_height) != (mask.width, mask.height):
        raise RasterError(
            f"mask {mask.width}x{mask.height} does not match tile grid "
            f"{tiles.parent_width}x{tiles.parent_height}"
        )
    binary = mask.binary_mask()
    s = tiles.tile_size
    positive = 0
    total = 0
    count = 0
    for t in tiles.tiles:
        r, c = t.index.row_origin, t.index.col_origin
        block = binary[r : r + s, c : c + s]
        p = int(block.sum())
        if p == 0:
            continue
        positive += p
        total += block.size
        count += 1
    if count == 0:
        raise RasterError("no positive tiles")
    pos = positive / total
    return ClassDistribution(pos, 1.0 - pos, count)
