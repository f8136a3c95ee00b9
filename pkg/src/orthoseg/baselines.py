"""Unsupervised per-tile baselines: OTSU thresholding and 2-cluster K-means."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metrics import ConfusionCounts, ScoreRow, confusion, f1
from .preprocess import BandSelection, select_bands
from .raster import DatasetManifest
from .tiler import Tile, mask_tiles, rebuild, split

BINS = 256
METHODS = ("otsu", "kmeans")


class DegenerateInput(ValueError):
    """Raised when a tile offers nothing to separate."""


def _values(tile: "Tile | np.ndarray", valid: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tile, Tile):
        data, valid = tile.data, tile.valid
    else:
        data = np.asarray(tile)
        if data.ndim == 2:
            data = data[None]
        if valid is None:
            valid = np.ones(data.shape[1:], dtype=bool)
    return data, valid


def histogram256(values: np.ndarray) -> np.ndarray:
    """Min-max scale values into 256 integer bins (0..255)."""
    bins = to_bins(values)
    return np.bincount(bins, minlength=BINS).astype(np.int64)


def to_bins(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        raise DegenerateInput("degenerate histogram")
    return np.clip(np.floor((v - lo) / (hi - lo) * (BINS - 1)), 0, BINS - 1).astype(np.int64)


def otsu_threshold(hist: np.ndarray) -> int:
    """Threshold ``t`` maximizing between-class variance of ``bin <= t`` vs ``bin > t``.

    Ties go to the smallest ``t``. Candidates are compared exactly through
    integer arithmetic: with ``n0, s0`` the count and bin-sum at or below
    ``t`` and ``n1, s1`` above, the between-class variance is proportional to
    ``(n0*s1 - n1*s0)**2 / (n0*n1)``.
    """
    hist = np.asarray(hist, dtype=np.int64)
    if hist.shape != (BINS,):
        raise ValueError(f"expected {BINS} bins, got {hist.shape}")
    if np.count_nonzero(hist) < 2:
        raise DegenerateInput("degenerate histogram")
    levels = np.arange(BINS, dtype=np.int64)
    n0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    n, s = int(n0[-1]), int(s0[-1])
    n1 = n - n0
    s1 = s - s0
    num = (n0 * s1 - n1 * s0).astype(np.float64) ** 2
    den = (n0 * n1).astype(np.float64)
    score = np.divide(num, den, out=np.zeros(BINS), where=den > 0)
    best = score.max()
    # float screening, then an exact comparison among the near-ties
    cands = np.flatnonzero(score >= best * (1 - 1e-9))
    best_t, best_num, best_den = None, 0, 1
    for t in cands.tolist():
        a0, a1 = int(n0[t]), n - int(n0[t])
        if a0 == 0 or a1 == 0:
            continue
        b0 = int(s0[t])
        nm = (a0 * (s - b0) - a1 * b0) ** 2
        dn = a0 * a1
        if best_t is None or nm * best_den > best_num * dn:
            best_t, best_num, best_den = t, nm, dn
    return int(best_t if best_t is not None else 0)


def otsu_segment(tile: "Tile | np.ndarray", valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Binary mask: 1 where the tile's (channel-mean) bin exceeds the OTSU threshold."""
    data, valid = _values(tile, valid)
    gray = data.astype(np.float64).mean(axis=0)
    vals = gray[valid]
    if vals.size == 0:
        raise DegenerateInput("degenerate histogram")
    bins = to_bins(vals)
    t = otsu_threshold(np.bincount(bins, minlength=BINS))
    out = np.zeros(gray.shape, dtype=np.uint8)
    out[valid] = (bins > t).astype(np.uint8)
    return out


@dataclass
class KMeansResult:
    labels: np.ndarray  # cluster id per point
    centroids: np.ndarray  # (2, d)
    objective: list[float] = field(default_factory=list)
    iterations: int = 0
    positive: int = 1


def _sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def lloyd_kmeans(points: np.ndarray, iters_max: int = 100, seed: int = 0) -> KMeansResult:
    """Two-cluster Lloyd iterations on ``(n, d)`` points.

    The first centroid is a seeded random point, the second the point farthest
    from it. ``objective`` logs the within-cluster sum of squares after every
    assignment and every update step, so it is non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if n < 2:
        raise DegenerateInput("degenerate input")
    rng = np.random.default_rng(seed)
    first = points[rng.integers(n)]
    d0 = ((points - first) ** 2).sum(axis=1)
    if d0.max() == 0:
        raise DegenerateInput("degenerate input")
    centroids = np.stack([first, points[int(d0.argmax())]])

    labels = None
    history: list[float] = []
    it = 0
    for it in range(1, iters_max + 1):
        dist = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        new = (dist[:, 1] < dist[:, 0]).astype(np.int64)
        history.append(_sse(points, centroids, new))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(2):
            members = points[labels == k]
            if len(members) == 0:
                # re-seed an empty cluster at the point farthest from the other centroid
                other = centroids[1 - k]
                far = int(((points - other) ** 2).sum(axis=1).argmax())
                centroids[k] = points[far]
                labels[far] = k
            else:
                centroids[k] = members.mean(axis=0)
        history.append(_sse(points, centroids, labels))
    assert labels is not None
    brightness = centroids.mean(axis=1)
    positive = int(brightness[1] > brightness[0])
    return KMeansResult(labels, centroids, history, it, positive)


def kmeans_segment(
    tile: "Tile | np.ndarray",
    iters_max: int = 100,
    seed: int = 0,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Binary mask: 1 for pixels in the brighter of two K-means clusters."""
    data, valid = _values(tile, valid)
    pts = data[:, valid].T.astype(np.float64)
    if len(pts) < 2:
        raise DegenerateInput("degenerate input")
    res = lloyd_kmeans(pts, iters_max, seed)
    out = np.zeros(valid.shape, dtype=np.uint8)
    out[valid] = (res.labels == res.positive).astype(np.uint8)
    return out


def segment_tile(tile: Tile, method: str, seed: int = 0) -> np.ndarray:
    """Run a baseline on one tile; degenerate tiles yield an all-zero mask."""
    if method not in METHODS:
        raise ValueError(f"unknown baseline method {method!r}")
    try:
        if method == "otsu":
            return otsu_segment(tile)
        return kmeans_segment(tile, seed=seed)
    except DegenerateInput:
        return np.zeros(tile.valid.shape, dtype=np.uint8)


@dataclass(frozen=True)
class BaselineResult:
    plot: str
    method: str
    selection: str
    counts: ConfusionCounts
    fold: Optional[str] = None

    @property
    def f1(self) -> float:
        return f1(self.counts)

    def score_row(self) -> ScoreRow:
        return ScoreRow(self.selection, self.method.upper(), self.fold or self.plot, self.f1)


def segment_plot(image, tile_size: int, bands: BandSelection, method: str, seed: int = 0):
    """Tile, segment each tile independently and rebuild the plot mask."""
    grid = split(image, tile_size)
    masks = [
        segment_tile(select_bands(t, bands), method, seed + k)
        if t.n_valid
        else np.zeros((tile_size, tile_size), np.uint8)
        for k, t in enumerate(grid.tiles)
    ]
    return rebuild(grid, masks, geo_transform=image.geo_transform)


def baseline_evaluate(
    manifest: DatasetManifest,
    plots: Sequence[str],
    bands: "BandSelection | Sequence[str]",
    method: str,
    seed: int = 0,
    folds: Optional[dict[str, str]] = None,
) -> list[BaselineResult]:
    """Per-plot F1 of a baseline, each tile segmented on its own.

    ``folds`` optionally maps plot name to the fold name used in reports.
    """
    if not isinstance(bands, BandSelection):
        bands = BandSelection.of(bands)
    for p in plots:
        manifest.plot(p)
    results = []
    for p in plots:
        image, mask = manifest.plot(p).load()
        pred = segment_plot(image, manifest.tile_size, bands, method, seed)
        valid = image.valid_mask() & mask.valid_mask()
        counts = confusion(pred.binary_mask(), mask.binary_mask(), valid)
        results.append(
            BaselineResult(p, method, bands.label, counts, (folds or {}).get(p))
        )
    return results


def tile_confusions(image, mask, tile_size: int, bands: BandSelection, method: str) -> list[ConfusionCounts]:
    """Per-tile confusion counts (useful for inspecting sparse tiles)."""
    img_grid = split(image, tile_size)
    msk_grid = mask_tiles(mask, tile_size)
    out = []
    for k, (t, m) in enumerate(zip(img_grid.tiles, msk_grid.tiles)):
        pred = segment_tile(select_bands(t, bands), method, k) if t.n_valid else np.zeros_like(m.valid, np.uint8)
        out.append(confusion(pred, m.data[0], t.valid & m.valid))
    return out
