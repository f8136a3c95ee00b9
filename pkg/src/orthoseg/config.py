"""Run configuration TOML.

Sections::

    [dataset]   manifest (path, relative to the config file), optional tile_size
    [dataset.folds.<NAME>]   train = [plot, ...], test = plot
    [bands]     select = ["NIR"]
    [network]   arch, depth, base_width, dropout_p, init, ...
    [train]     learning_rate, weight_decay, pos_weight, epochs, batch_size,
                seed, val_fraction, threshold, patience, keep_best, repetitions
    [augment]   rotation_max_deg, flip_horizontal, brightness, contrast,
                saturation, hue
    [output]    dir

When no folds are given and the manifest holds the four public plots, the
standard T1-T4 folds apply.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .nets import NetworkConfig
from .preprocess import AugmentationConfig, BandSelection
from .raster import DatasetManifest, load_manifest
from .trainer import STANDARD_FOLDS, EarlyStopConfig, FoldSpec, TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    manifest: DatasetManifest
    folds: tuple[FoldSpec, ...]
    bands: BandSelection
    network: NetworkConfig
    train: TrainConfig
    augment: AugmentationConfig
    repetitions: int = 1
    output_dir: Path = Path("runs")

    def fold(self, name: str) -> FoldSpec:
        for f in self.folds:
            if f.name == name:
                return f
        raise RunConfigError(f"unknown fold {name!r}; known: {[f.name for f in self.folds]}")


def _pick(cls, table: dict, section: str, drop: tuple[str, ...] = ()) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(table) - known - set(drop)
    if extra:
        raise RunConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    return {k: v for k, v in table.items() if k in known}


def read_toml(path: "str | Path") -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_run_config(path: "str | Path", overrides: Optional[dict[str, dict]] = None) -> RunConfig:
    path = Path(path)
    doc = read_toml(path)
    for section, values in (overrides or {}).items():
        doc.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    root = path.parent

    ds = doc.get("dataset", {})
    if "manifest" not in ds:
        raise RunConfigError("[dataset] needs a manifest path")
    manifest = load_manifest(root / ds["manifest"])
    if "tile_size" in ds:
        manifest = dataclasses.replace(manifest, tile_size=int(ds["tile_size"]))

    folds_tbl = ds.get("folds", {})
    if folds_tbl:
        folds = tuple(
            FoldSpec(name, tuple(f["train"]), f["test"]) for name, f in folds_tbl.items()
        )
    else:
        names = set(manifest.plot_names)
        folds = tuple(
            f for f in STANDARD_FOLDS if {*f.train_plots, f.test_plot} <= names
        )
    for f in folds:
        f.validate(manifest)

    bands = BandSelection.of(doc.get("bands", {}).get("select", ["NIR"]))

    net_tbl = dict(doc.get("network", {}))
    net_tbl.setdefault("in_channels", len(bands))
    network = NetworkConfig(**_pick(NetworkConfig, net_tbl, "network"))
    if network.in_channels != len(bands):
        raise RunConfigError(
            f"network.in_channels = {network.in_channels} but {len(bands)} bands selected"
        )

    tr = dict(doc.get("train", {}))
    repetitions = int(tr.pop("repetitions", 1))
    early = EarlyStopConfig(
        patience=tr.pop("patience", None),
        keep_best=bool(tr.pop("keep_best", True)),
    )
    train = TrainConfig(early_stop=early, **_pick(TrainConfig, tr, "train"))

    aug = AugmentationConfig(**_pick(AugmentationConfig, doc.get("augment", {}), "augment"))
    out = Path(doc.get("output", {}).get("dir", "runs"))
    if not out.is_absolute():
        out = root / out
    return RunConfig(manifest, folds, bands, network, train, aug, repetitions, out)
