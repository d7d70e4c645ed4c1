import pytest

from endoview.colorspace import ColorSpace
from endoview.config import ConfigError, Settings, dump_settings, load_settings, parse_settings
from endoview.dataset import Modality
from endoview.descriptors import Family


def test_defaults():
    s = Settings()
    assert s.seed == 42 and s.search.radius_mm == 20.0 and s.search.n_queries == 9
    assert s.search.radii_mm == (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0)
    assert s.synth.em_noise_sigma == 5.0 and s.synth.ui_fraction == 0.15 and s.synth.lambda_roll == 2.0
    assert s.uifilter.C_grid == (1.0, 10.0, 100.0) and s.uifilter.variance == 0.95
    assert len(s.sweep.families) * len(s.sweep.spaces) == 42
    assert s.filter_descriptor().family is Family.MLBP and s.filter_descriptor().space is ColorSpace.GS


def test_parse_values():
    s = parse_settings(
        """
        # comment
        seed = 7
        descriptor.family = mhog   # trailing comment
        search.radii_mm = 10, 40
        search.max_k = 5
        search.correct_roll = no
        synth.modality = WL
        sweep.spaces = GS, HSV
        """
    )
    assert s.seed == 7 and s.descriptor.family is Family.MHOG
    assert s.search.radii_mm == (10.0, 40.0) and s.search.max_k == 5 and s.search.correct_roll is False
    assert s.synth.modality is Modality.WL and s.sweep.spaces == (ColorSpace.GS, ColorSpace.HSV)


def test_round_trip():
    s = parse_settings("seed = 3\nsearch.max_k = 4\ndescriptor.ltp_threshold = 0.125\n")
    assert parse_settings(dump_settings(s)) == s
    assert parse_settings(dump_settings(Settings())) == Settings()


@pytest.mark.parametrize(
    "text",
    ["nonsense", "bogus.key = 1", "search.bogus = 1", "seed = abc", "search.correct_roll = maybe", "descriptor.family = XYZ", "search = 3"],
)
def test_errors(text):
    with pytest.raises(ConfigError):
        parse_settings(text)


def test_load_settings(tmp_path):
    assert load_settings(None) == Settings()
    (tmp_path / "c.conf").write_text("synth.n_frames = 30\n", encoding="utf-8")
    assert load_settings(tmp_path / "c.conf").synth.n_frames == 30
