import json

import numpy as np
import pytest

from orthoseg.raster import load_manifest
from orthoseg.synth import SynthError, SyntheticFieldSpec, generate_field, spec_from_dict, write_dataset


def _small(**kw):
    base = dict(width=64, height=48, row_spacing=16, plant_spacing=10, canopy_width=6, seed=1)
    base.update(kw)
    return SyntheticFieldSpec(**base)


class TestGenerate:
    def test_noiseless_image_is_painted_mask(self):
        spec = _small().with_noise(0.0)
        image, mask = generate_field(spec)
        vine = mask.binary_mask().astype(bool)
        assert image.width == 64 and image.height == 48
        for name, (v, s, _) in spec.band_profile.items():
            plane = image.band(name)
            assert np.all(plane[vine] == np.float32(v)) and np.all(plane[~vine] == np.float32(s))

    def test_vine_fraction_plausible(self):
        _, mask = generate_field(_small(width=160, height=160))
        frac = mask.binary_mask().mean()
        # canopy 6 px out of every 16, modulated between 0.6 and 1.0 of its width
        assert 0.6 * 6 / 16 < frac < 6 / 16 + 0.02

    def test_azimuth_rotates_pattern(self):
        # non-integer spacing keeps pixel centres off the canopy edge, where cos(90 deg) != 0 would bite
        kw = dict(width=40, height=40, plant_spacing=10.3, row_offset=3.3)
        a = _small(row_azimuth=0.0, **kw).with_noise(0.0)
        b = _small(row_azimuth=90.0, **kw).with_noise(0.0)
        ma = generate_field(a)[1].binary_mask()
        mb = generate_field(b)[1].binary_mask()
        assert np.array_equal(ma, mb.T)
        # rows run vertically at azimuth 0, so some columns are pure soil
        assert ma.any(axis=0).sum() < 40

    def test_weeds_are_unlabelled_vegetation(self):
        spec = _small(width=96, height=96, weed_density=0.1).with_noise(0.0)
        image, mask = generate_field(spec)
        nir = image.band("NIR")
        green = nir == np.float32(spec.band_profile["NIR"][0])
        weeds = green & (mask.binary_mask() == 0)
        assert weeds.sum() > 0

    def test_deterministic(self):
        a = generate_field(_small().with_noise(0.1))
        b = generate_field(_small().with_noise(0.1))
        assert np.array_equal(a[0].to_array(), b[0].to_array())
        c = generate_field(_small(seed=2).with_noise(0.1))
        assert not np.array_equal(a[0].to_array(), c[0].to_array())

    @pytest.mark.parametrize("kw", [
        {"width": 0}, {"row_spacing": 5, "canopy_width": 6}, {"weed_density": 1.5},
        {"band_profile": {}}, {"band_profile": {"NIR": (0.5, 0.4, -1.0)}},
        {"band_profile": {"XX": (0.5, 0.4, 0.1)}},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            _small(**kw)


class TestSpecFromDict:
    def test_noise_and_bands(self):
        spec = spec_from_dict({"width": 32, "height": 32, "bands": ["NIR", "R"], "noise_std": 0.2,
                               "plots": ["x"]})
        assert list(spec.band_profile) == ["NIR", "R"]
        assert all(p[2] == 0.2 for p in spec.band_profile.values())

    def test_unknown_key(self):
        with pytest.raises(SynthError, match="unknown"):
            spec_from_dict({"widht": 3})


class TestWriteDataset:
    def test_manifest(self, tmp_path):
        spec = _small(width=40, height=40).with_noise(0.05)
        m = write_dataset(spec, tmp_path, ["A", "B"], tile_size=20, suffix=".hdr")
        assert m.plot_names == ["A", "B"] and m.tile_size == 20
        back = load_manifest(tmp_path / "manifest.json")
        assert back.plot_names == ["A", "B"]
        a_img, a_msk = back.plot("A").load()
        b_img, b_msk = back.plot("B").load()
        assert a_img.width == 40 and a_msk.band_ids[0].value == "MASK"
        assert not np.array_equal(a_msk.binary_mask(), b_msk.binary_mask())
        json.loads((tmp_path / "manifest.json").read_text())
