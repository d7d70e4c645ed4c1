import math

import numpy as np
import pytest
from conftest import make_frame
from hypothesis import given, settings
from hypothesis import strategies as st

from endoview.dataset import Modality
from endoview.descriptors import DescriptorConfig, DescriptorVector
from endoview.localization import roll_quaternion
from endoview.matching import (
    DescriptorCache,
    MatchReport,
    NoCandidatesError,
    best_viewpoint,
    chi_squared,
    roll_bucket,
)

CFG = DescriptorConfig(pyramid_levels=1, grid=2)


def hist(n, seed):
    v = np.random.default_rng(seed).random(n)
    return v / v.sum()


def test_chi_squared_known_values():
    assert chi_squared([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert chi_squared([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert chi_squared([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert chi_squared([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.5 * (0.25 / 1.5 + 0.25 / 0.5))


def test_chi_squared_checks():
    with pytest.raises(ValueError, match="lengths"):
        chi_squared([1.0], [0.5, 0.5])
    with pytest.raises(ValueError, match="fingerprint"):
        chi_squared(DescriptorVector([1.0], "a"), DescriptorVector([1.0], "b"))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_chi_squared_bounds(n, seed):
    a, b = hist(n, seed), hist(n, seed + 1)
    d = chi_squared(a, b)
    assert 0.0 <= d <= 1.0 + 1e-12
    assert d == chi_squared(b, a)


def test_roll_bucket():
    assert roll_bucket(0.0) == 0
    assert roll_bucket(math.radians(-1.2)) == 359
    assert roll_bucket(math.radians(359.6)) == 0


def _frame(fid, image, roll=0.0, z=0.0):
    return make_frame(fid, (0, 0, z), image=image, orientation=roll_quaternion(roll))


def test_best_viewpoint_finds_identical_image():
    rng = np.random.default_rng(0)
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(4)]
    query = _frame(100, imgs[2])
    cands = [_frame(i, img, z=i) for i, img in enumerate(imgs)]
    rep = best_viewpoint(query, cands, CFG, correct_roll=False)
    assert rep.best == ("db", 2) and rep.candidates[0][1] == 0.0
    assert rep.em_baseline == ("db", 0) and rep.k == 4


def test_roll_correction_undoes_camera_twist():
    from endoview.synthgen import CameraSample, TubeWorld, render

    world = TubeWorld(seed=3)
    query = _frame(0, render(world, CameraSample(60.0, 0.4)), roll=0.4)
    twisted = _frame(1, render(world, CameraSample(60.0, 1.3)), roll=1.3)
    other = _frame(2, render(world, CameraSample(75.0, 0.4)), roll=0.4, z=1)
    cfg = DescriptorConfig()
    assert best_viewpoint(query, [other, twisted], cfg, correct_roll=True).best == ("db", 1)
    corrected = dict((r[1], d) for r, d in best_viewpoint(query, [twisted], cfg, True).candidates)
    plain = dict((r[1], d) for r, d in best_viewpoint(query, [twisted], cfg, False).candidates)
    assert corrected[1] < plain[1]


def test_cache_reuse():
    rng = np.random.default_rng(1)
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(3)]
    cache = DescriptorCache()
    cands = [_frame(i, im, z=i) for i, im in enumerate(imgs)]
    best_viewpoint(_frame(9, imgs[0]), cands, CFG, cache=cache)
    assert cache.misses == 4 and cache.hits == 0
    best_viewpoint(_frame(9, imgs[0]), cands, CFG, cache=cache)
    assert cache.misses == 4 and cache.hits == 4


def test_no_candidates_and_modality_mismatch():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    with pytest.raises(NoCandidatesError):
        best_viewpoint(_frame(0, img), [], CFG)
    wl = make_frame(1, (0, 0, 0), image=img, modality=Modality.WL)
    with pytest.raises(ValueError, match="modality"):
        best_viewpoint(_frame(0, img), [wl], CFG)


def test_match_report_validation_and_records():
    with pytest.raises(ValueError, match="non-decreasing"):
        MatchReport(("q", 0), ((("d", 1), 0.5), (("d", 2), 0.1)), ("d", 1), CFG, 20.0)
    with pytest.raises(ValueError, match="baseline"):
        MatchReport(("q", 0), ((("d", 1), 0.1),), ("d", 7), CFG, 20.0)
    rep = MatchReport(("q", 0), ((("d", 1), 0.1), (("d", 2), 0.3)), ("d", 2), CFG, 20.0)
    recs = rep.to_records(lambda q, m: 2 if m[1] == 1 else 0)
    assert [(r.match_frame, r.rank, r.score) for r in recs] == [(1, 1, 2), (2, 2, 0)]

