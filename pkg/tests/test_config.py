import textwrap

import pytest

from orthoseg.config import RunConfigError, load_run_config
from orthoseg.synth import SyntheticFieldSpec, write_dataset


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfgdata")
    spec = SyntheticFieldSpec(width=32, height=32, row_spacing=12, canopy_width=4)
    write_dataset(spec, d / "data", ["A", "B", "C"], tile_size=16, suffix=".hdr")
    return d


def _write(d, body):
    p = d / "run.toml"
    p.write_text(textwrap.dedent(body))
    return p


BASE = """
[dataset]
manifest = "data/manifest.json"
[dataset.folds.F1]
train = ["A", "B"]
test = "C"
[bands]
select = ["NIR", "R"]
[network]
arch = "segnet"
depth = 2
base_width = 4
[train]
epochs = 3
patience = 2
repetitions = 4
[output]
dir = "out"
"""


class TestLoad:
    def test_full(self, dataset_dir):
        cfg = load_run_config(_write(dataset_dir, BASE))
        assert cfg.network.arch == "segnet" and cfg.network.in_channels == 2
        assert cfg.train.epochs == 3 and cfg.train.early_stop.patience == 2
        assert cfg.repetitions == 4
        assert cfg.fold("F1").test_plot == "C"
        assert cfg.output_dir == dataset_dir / "out"
        assert cfg.manifest.tile_size == 16

    def test_overrides(self, dataset_dir):
        cfg = load_run_config(_write(dataset_dir, BASE), {"network": {"arch": "unet"},
                                                          "train": {"epochs": None, "seed": 9}})
        assert cfg.network.arch == "unet" and cfg.train.epochs == 3 and cfg.train.seed == 9

    def test_unknown_key(self, dataset_dir):
        with pytest.raises(RunConfigError, match="unknown keys"):
            load_run_config(_write(dataset_dir, BASE + "\n[augment]\nspin = 1\n"))

    def test_channel_mismatch(self, dataset_dir):
        body = BASE.replace("base_width = 4", "base_width = 4\nin_channels = 3")
        with pytest.raises(RunConfigError, match="in_channels"):
            load_run_config(_write(dataset_dir, body))

    def test_unknown_fold(self, dataset_dir):
        cfg = load_run_config(_write(dataset_dir, BASE))
        with pytest.raises(RunConfigError):
            cfg.fold("T9")

    def test_fold_with_unknown_plot(self, dataset_dir):
        with pytest.raises(ValueError):
            load_run_config(_write(dataset_dir, BASE.replace('test = "C"', 'test = "Z"')))

    def test_missing_manifest_key(self, dataset_dir):
        with pytest.raises(RunConfigError):
            load_run_config(_write(dataset_dir, "[bands]\nselect = ['NIR']\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_run_config(tmp_path / "nope.toml")
