"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import math
import statistics
import time

import numpy as np
import pytest
from reference import reference_descriptor
from scipy.spatial.transform import Rotation

from endoview.cli import main
from endoview.colorspace import convert
from endoview.descriptors import DescriptorConfig, Family, extract
from endoview.harness import compute_stats, evaluate, prepare_pair, retrieval_rate
from endoview.localization import RigidTransform, register_landmarks
from endoview.matching import chi_squared
from endoview.synthgen import LANDMARKS_MM
from endoview.uifilter import _intervention_data, cross_validate, fit_pca, rbf_kernel, train_filter, train_svm

RADIUS = 20.0
MATCH_CFG = DescriptorConfig(space="HSV")


def scores(z, o, t):
    return [0] * z + [1] * o + [2] * t


def test_1_statistics_oracle(acceptance):
    start = time.perf_counter()
    hsv = compute_stats(scores(5, 8, 47))
    em = compute_stats(scores(16, 19, 25))
    elapsed = time.perf_counter() - start
    ok = (
        abs(hsv.avg_score - 1.700) <= 0.001
        and abs(hsv.std_dev - 0.619) <= 0.001
        and abs(em.avg_score - 1.150) <= 0.001
        and elapsed < 1.0
    )
    acceptance(1, "statistics", ok, f"avg {hsv.avg_score:.4f} std {hsv.std_dev:.4f}; EM avg {em.avg_score:.4f}; {elapsed:.3f}s")


def test_2_descriptor_oracle(acceptance):
    rng = np.random.default_rng(2024)
    images = [rng.integers(0, 256, (64, 64, 3), dtype=np.uint8) for _ in range(20)]
    start = time.perf_counter()
    worst = {}
    for family in Family:
        cfg = DescriptorConfig(family=family, pyramid_levels=2, grid=4)
        for img in images:
            planes = convert(img, cfg.space)
            got = extract(planes, cfg).values
            ref = reference_descriptor(planes.planes, cfg)
            err = np.inf if got.shape != ref.shape else float(np.abs(got - ref).max())
            worst[family.value] = max(worst.get(family.value, 0.0), err)
    elapsed = time.perf_counter() - start
    counts_exact = all(worst[f] == 0.0 for f in ("MLBP", "MLTP", "SWMLBP", "MLIOP"))
    ok = counts_exact and max(worst.values()) <= 1e-6 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance(2, "descriptor oracle", ok, f"max abs error {detail}; {elapsed:.1f}s")


def test_3_chi_squared_identities(acceptance):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    fails = 0
    float_dev = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 512))
        x = rng.random(n)
        x /= x.sum()
        y = rng.random(n)
        y /= y.sum()
        if chi_squared(x, x) != 0.0 or chi_squared(x, y) != chi_squared(y, x):
            fails += 1
        # count histograms over a power-of-two cell: masses are exactly 1
        support = rng.random(n) < 0.5
        support[0], support[-1] = True, False
        cells = 1 << int(rng.integers(4, 11))
        a = np.zeros(n)
        b = np.zeros(n)
        a[support] = np.bincount(rng.integers(0, support.sum(), cells), minlength=support.sum())
        b[~support] = np.bincount(rng.integers(0, (~support).sum(), cells), minlength=(~support).sum())
        if chi_squared(a / cells, b / cells) != 1.0:
            fails += 1
        # arbitrary float normalization carries its own rounding in the sums
        u = np.where(support, x, 0.0)
        v = np.where(support, 0.0, y)
        float_dev = max(float_dev, abs(chi_squared(u / u.sum(), v / v.sum()) - 1.0))
    elapsed = time.perf_counter() - start
    ok = fails == 0 and float_dev <= 1e-15 and elapsed < 5
    acceptance(3, "chi-squared", ok, f"{fails} violations in 1000 trials; float-normalized disjoint deviation {float_dev:.1e}; {elapsed:.2f}s")


def _true_transform(rng):
    q = Rotation.random(random_state=int(rng.integers(1 << 31))).as_quat()
    return RigidTransform(np.r_[q[3], q[:3]], rng.uniform(-200, 200, 3))


def test_4_registration(acceptance):
    marks = np.array(list(LANDMARKS_MM.values()))
    start = time.perf_counter()
    rot_err = trans_err = 0.0
    noisy = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t = _true_transform(rng)
        est = register_landmarks(marks, t.apply(marks))
        rot_err = max(rot_err, est.compose(t.inverse()).rotation_angle())
        trans_err = max(trans_err, float(np.linalg.norm(est.translation - t.translation)))
        target = t.apply(marks) + rng.normal(0, 0.1, marks.shape)
        noisy.append(float(np.linalg.norm(register_landmarks(marks, target).translation - t.translation)))
    elapsed = time.perf_counter() - start
    median = statistics.median(noisy)
    ok = rot_err < 1e-9 and trans_err < 1e-9 and median < 0.5 and elapsed < 10
    acceptance(
        4,
        "registration",
        ok,
        f"noiseless max rotation err {rot_err:.1e} rad, translation err {trans_err:.1e} mm; "
        f"sigma 0.1 median translation err {median:.3f} mm; {elapsed:.2f}s",
    )


@pytest.fixture(scope="module")
def trained_filter(filter_interventions):
    start = time.perf_counter()
    trained = train_filter(filter_interventions, 100.0, 0.1)
    trained.seconds = time.perf_counter() - start
    return trained


@pytest.fixture(scope="module")
def filtered_pairs(eval_pairs, trained_filter):
    start = time.perf_counter()
    pairs = [prepare_pair(p.a, p.b, p.truth, trained_filter.model) for p in eval_pairs]
    pairs_seconds = time.perf_counter() - start
    return pairs, pairs_seconds


@pytest.mark.slow
def test_5_end_to_end_direction(acceptance, eval_pairs, filter_interventions, trained_filter, filtered_pairs):
    pairs, prep_seconds = filtered_pairs
    start = time.perf_counter()
    ev = evaluate(pairs, RADIUS, MATCH_CFG)
    elapsed = time.perf_counter() - start + prep_seconds + eval_pairs.seconds + filter_interventions.seconds + trained_filter.seconds
    image, em = retrieval_rate(ev.image), retrieval_rate(ev.em)
    ok = len(ev.image) == 90 and image >= em + 10 and image >= 85 and elapsed < 300
    acceptance(
        5,
        "end-to-end",
        ok,
        f"{len(ev.image)} queries; image-based with filter {image:.2f}% vs EM-only {em:.2f}%; "
        f"{elapsed:.0f}s including data generation and filter training",
    )


@pytest.mark.slow
def test_6_radius_trend(acceptance, filtered_pairs):
    pairs, _ = filtered_pairs
    near = evaluate(pairs, 10.0, MATCH_CFG)
    far = evaluate(pairs, 70.0, MATCH_CFG)
    em10, em70 = compute_stats(near.em).avg_score, compute_stats(far.em).avg_score
    pool10, pool70 = compute_stats(near.pool).avg_score, compute_stats(far.pool).avg_score
    ok = em70 <= em10 and pool70 <= pool10
    acceptance(
        6,
        "radius trend",
        ok,
        f"EM nearest neighbour avg {em10:.3f} at 10 mm, {em70:.3f} at 70 mm; "
        f"EM candidate pool avg {pool10:.3f} at 10 mm, {pool70:.3f} at 70 mm",
    )


@pytest.mark.slow
def test_7_filter_quality(acceptance, filter_interventions):
    start = time.perf_counter()
    cv = cross_validate(filter_interventions)
    elapsed = time.perf_counter() - start + filter_interventions.seconds
    m = cv.pooled
    ok = len(cv.fold_metrics) == 6 and m.precision >= 0.95 and m.recall >= 0.90 and elapsed < 180
    acceptance(
        7,
        "UI filter",
        ok,
        f"LOIO over 6 interventions, C={cv.best_C:g} gamma={cv.best_gamma:g}: "
        f"precision {m.precision:.3f}, recall {m.recall:.3f}; {elapsed:.0f}s",
    )


def test_8_svm_pca_numerics(acceptance, filter_interventions):
    data = _intervention_data(filter_interventions[:2], DescriptorConfig())
    x = np.concatenate([d[1] for d in data])
    y = np.concatenate([d[2] for d in data])
    pca = fit_pca(x, 0.95)
    ortho = float(np.abs(pca.basis.T @ pca.basis - np.eye(pca.dim)).max())
    z = pca.project(x)
    svm = train_svm(z, y, 10.0, 0.1)
    direct = rbf_kernel(z, svm.support_vectors, svm.gamma) @ svm.dual_coef + svm.bias
    loop = np.array([sum(c * math.exp(-svm.gamma * float(np.sum((zi - s) ** 2))) for c, s in zip(svm.dual_coef, svm.support_vectors)) for zi in z[:50]])
    dev = max(float(np.abs(svm.decision_function(z) - direct).max()), float(np.abs(svm.training_decision - direct).max()),
              float(np.abs(loop + svm.bias - direct[:50]).max()))
    xor_x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    xor_y = np.array([-1, -1, 1, 1])
    xor_ok = bool(np.array_equal(train_svm(xor_x, xor_y, 10.0, 1.0).predict(xor_x), xor_y))
    ok = dev <= 1e-6 and ortho <= 1e-8 and xor_ok
    acceptance(
        8,
        "SVM/PCA numerics",
        ok,
        f"decision deviation {dev:.1e}; PCA orthonormality error {ortho:.1e} ({pca.dim} components); XOR {'separated' if xor_ok else 'misclassified'}",
    )


def _run_pipeline(root, conf):
    out = root / "out"
    common = ["--config", str(conf), "--seed", "5", "--out", str(out)]
    assert main(common + ["generate", "--count", "2"]) == 0
    assert main(common + ["filter-train", str(out / "pair_5" / "A"), str(out / "pair_5" / "B")]) == 0
    model = str(out / "filter.evuf")
    for cmd in ("evaluate", "sweep-radius", "sweep-combos"):
        assert main(common + [cmd, str(out / "pair_6"), "--model", model]) == 0
    assert main(common + ["stats", str(out / "matches.csv")]) == 0
    return out


@pytest.mark.slow
def test_9_determinism(acceptance, tmp_path):
    conf = tmp_path / "small.conf"
    conf.write_text(
        "synth.n_frames = 40\nsearch.radii_mm = 10, 30\nsearch.n_queries = 4\nsearch.query_noise_mm = 1.5\n"
        "sweep.families = MLBP, MHOG\nsweep.spaces = GS, HSV\nuifilter.C_grid = 10, 100\nuifilter.gamma_grid = 0.1\n"
        "uifilter.repetitions = 2\n",
        encoding="utf-8",
    )
    first = _run_pipeline(tmp_path / "run1", conf)
    second = _run_pipeline(tmp_path / "run2", conf)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    csvs = [f for f in files if f.suffix == ".csv"]
    differ = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    same_listing = files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    ok = same_listing and not differ and len(csvs) >= 6
    acceptance(9, "determinism", ok, f"{len(files)} output files ({len(csvs)} CSV) compared byte for byte; differing: {differ or 'none'}")
