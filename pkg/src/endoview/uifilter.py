"""Uninformative-frame filter: mLBP-GS features, k-means data selection, PCA, RBF SVM.

The positive class throughout is *uninformative*; precision and recall are
reported for that class.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .colorspace import ColorSpace
from .dataset import Frame, Intervention, Label
from .descriptors import DescriptorConfig, Family, describe

log = logging.getLogger(__name__)

DEFAULT_FILTER_CONFIG = DescriptorConfig(family=Family.MLBP, space=ColorSpace.GS)
DEFAULT_C_GRID = (1.0, 10.0, 100.0)
DEFAULT_GAMMA_GRID = (0.01, 0.1, 1.0)
TAU = 1e-12


class FilterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Representative selection (k-means)
# ---------------------------------------------------------------------------


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeds; stops once assignments are stable."""
    n = x.shape[0]
    first = int(rng.integers(n))
    centers = [x[first]]
    chosen = {first}
    closest = _sq_dists(x, x[first : first + 1])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining mass sits on chosen points
            rest = [i for i in range(n) if i not in chosen]
            idx = int(rng.choice(rest))
        chosen.add(idx)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx : idx + 1])[:, 0])
    centers = np.array(centers)

    assign = np.full(n, -1)
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(x, centers), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    return centers, assign


def _representatives_of(x: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    k = math.ceil(fraction * n)
    if k >= n:
        return np.arange(n)
    centers, _ = kmeans(x, k, rng)
    dists = _sq_dists(x, centers)
    picked: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for c in range(k):
        col = np.where(taken, np.inf, dists[:, c])
        i = int(np.argmin(col))
        taken[i] = True
        picked.append(i)
    return np.array(sorted(picked))


def select_representatives(features: dict, fraction: float = 0.25, seed: int = 0) -> dict:
    """Per class, indices of the samples nearest to ``ceil(fraction * n)`` k-means centres.

    ``features`` maps a class key to an ``(n, d)`` array; the result maps the
    same keys to sorted index arrays of length ``k``.
    """
    if not 0.0 < fraction <= 1.0:
        raise FilterError(f"fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    out = {}
    for key in sorted(features, key=str):
        x = np.asarray(features[key], dtype=np.float64)
        if x.shape[0] == 0:
            raise FilterError(f"class {key!r} has no samples")
        out[key] = _representatives_of(x, fraction, rng)
    return out


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (d, m), orthonormal columns
    explained_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.basis.T + self.mean


def fit_pca(vectors: np.ndarray, target: float | int = 0.95) -> PcaModel:
    """Principal components of ``vectors``.

    A float ``target`` in (0, 1] keeps the fewest components whose cumulative
    explained variance reaches it; an int keeps that many components.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise FilterError("PCA needs at least 2 vectors")
    mean = x.mean(axis=0)
    xc = x - mean
    # right singular vectors of the centred data are the covariance eigenvectors
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s * s / (x.shape[0] - 1)
    rank = int(np.sum(s > s[0] * 1e-12)) if s[0] > 0 else 1
    if isinstance(target, (int, np.integer)) and not isinstance(target, bool):
        m = int(target)
        if not 1 <= m <= vt.shape[0]:
            raise FilterError(f"cannot keep {m} components from {vt.shape[0]}")
    else:
        if not 0.0 < target <= 1.0:
            raise FilterError(f"variance target must lie in (0, 1], got {target}")
        total = var.sum()
        if total == 0:
            m = 1
        else:
            cum = np.cumsum(var) / total
            m = int(np.searchsorted(cum, target - 1e-12) + 1)
        m = max(1, min(m, rank))
    # deterministic component sign: largest-magnitude loading positive
    basis = vt[:m].T.copy()
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(m)])
    basis *= np.where(flip == 0, 1.0, flip)
    return PcaModel(mean, basis, var[:m].copy())


# ---------------------------------------------------------------------------
# SVM trained by SMO
# ---------------------------------------------------------------------------


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.exp(-gamma * np.maximum(d, 0.0))


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    iterations: int = 0
    # decision values on the training set tracked incrementally by SMO
    training_decision: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.support_vectors.shape[0] == 0:
            return np.full(x.shape[0], self.bias)
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.decision_function(x) >= 0.0, 1, -1)


class _KernelRows:
    """Kernel rows computed on demand, kept in a bounded LRU cache."""

    def __init__(self, x: np.ndarray, gamma: float, max_rows: int | None):
        self.x = x
        self.gamma = gamma
        self.sq = (x * x).sum(1)
        self.max_rows = max_rows
        self.rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def __call__(self, i: int) -> np.ndarray:
        row = self.rows.get(i)
        if row is not None:
            self.rows.move_to_end(i)
            return row
        d = self.sq[i] - 2.0 * self.x @ self.x[i] + self.sq
        row = np.exp(-self.gamma * np.maximum(d, 0.0))
        self.rows[i] = row
        if self.max_rows is not None and len(self.rows) > self.max_rows:
            self.rows.popitem(last=False)
        return row


def class_bounds(y: np.ndarray, C: float, balanced: bool = True) -> np.ndarray:
    """Per-sample box constraints; the rarer class gets ``C``, the other proportionally less."""
    if not balanced:
        return np.full(y.shape, float(C))
    n_pos = int(np.sum(y > 0))
    n_neg = y.size - n_pos
    n_min = min(n_pos, n_neg)
    return np.where(y > 0, C * n_min / n_pos, C * n_min / n_neg)


def train_svm(
    x: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    gamma: float = 0.1,
    *,
    balanced: bool = True,
    tol: float = 1e-3,
    max_iter: int = 200_000,
    cache_rows: int | None = None,
) -> SvmModel:
    """Soft-margin RBF SVM solved by SMO with maximal-violating-pair selection.

    ``y`` holds +1/-1 labels. The solve is deterministic for a given sample
    order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.where(np.asarray(y) > 0, 1.0, -1.0)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise FilterError("x must be (n, m) with one label per row")
    if np.all(y > 0) or np.all(y < 0):
        raise FilterError("SVM training needs both classes")
    if C <= 0 or gamma <= 0:
        raise FilterError("C and gamma must be positive")

    n = y.size
    ub = class_bounds(y, C, balanced)
    kernel = _KernelRows(x, gamma, cache_rows)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a
    it = 0
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < ub)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < ub))
        if not up.any() or not low.any():
            break
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        j = int(np.argmin(np.where(low, yg, np.inf)))
        if yg[i] - yg[j] < tol:
            break
        it += 1
        k_i, k_j = kernel(i), kernel(j)
        q_ij = y[i] * y[j] * k_i[j]
        old_i, old_j = alpha[i], alpha[j]
        c_i, c_j = ub[i], ub[j]
        if y[i] != y[j]:
            quad = max(k_i[i] + k_j[j] + 2.0 * q_ij, TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > c_i - c_j:
                if alpha[i] > c_i:
                    alpha[i], alpha[j] = c_i, c_i - diff
            elif alpha[j] > c_j:
                alpha[j], alpha[i] = c_j, c_j + diff
        else:
            quad = max(k_i[i] + k_j[j] - 2.0 * q_ij, TAU)
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > c_i:
                if alpha[i] > c_i:
                    alpha[i], alpha[j] = c_i, total - c_i
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > c_j:
                if alpha[j] > c_j:
                    alpha[j], alpha[i] = c_j, total - c_j
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        d_i, d_j = alpha[i] - old_i, alpha[j] - old_j
        grad += y * (y[i] * d_i * k_i + y[j] * d_j * k_j)
    else:
        log.warning("SMO stopped at max_iter=%d before reaching tolerance %g", max_iter, tol)

    rho = _rho(y, grad, alpha, ub)
    sv = alpha > 0
    coef = alpha * y
    return SvmModel(
        support_vectors=x[sv].copy(),
        dual_coef=coef[sv].copy(),
        bias=-rho,
        gamma=float(gamma),
        C=float(C),
        iterations=it,
        training_decision=y * (grad + 1.0) - rho,
    )


def _rho(y, grad, alpha, ub) -> float:
    yg = y * grad
    at_ub = alpha >= ub
    at_lb = alpha <= 0
    free = ~at_ub & ~at_lb
    if free.any():
        return float(yg[free].mean())
    upper = (at_ub & (y < 0)) | (at_lb & (y > 0))
    lower = (at_ub & (y > 0)) | (at_lb & (y < 0))
    hi = yg[upper].min() if upper.any() else np.inf
    lo = yg[lower].max() if lower.any() else -np.inf
    return float((hi + lo) / 2.0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterMetrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_labels(cls, truth: np.ndarray, predicted: np.ndarray) -> "FilterMetrics":
        t = np.asarray(truth) > 0
        p = np.asarray(predicted) > 0
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))

    def __add__(self, other: "FilterMetrics") -> "FilterMetrics":
        return FilterMetrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else math.nan

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 1.0


# ---------------------------------------------------------------------------
# Feature extraction and the trained stack
# ---------------------------------------------------------------------------


def labeled_frames(intervention: Intervention) -> list[Frame]:
    return [f for f in intervention.frames if f.informative_label is not None]


def frame_features(frames: Sequence[Frame], cfg: DescriptorConfig = DEFAULT_FILTER_CONFIG) -> np.ndarray:
    if not frames:
        return np.zeros((0, 0))
    return np.stack([describe(f.image, cfg).values for f in frames])


def frame_targets(frames: Sequence[Frame]) -> np.ndarray:
    return np.array([1 if f.informative_label is Label.UNINFORMATIVE else -1 for f in frames])


@dataclass(frozen=True)
class FilterModel:
    config: DescriptorConfig
    pca: PcaModel
    svm: SvmModel

    def decision(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        if features.shape[1] != self.pca.input_dim:
            raise FilterError(
                f"descriptor length {features.shape[1]} does not match model input {self.pca.input_dim}"
            )
        if self.pca.dim != self.svm.dim:
            raise FilterError("PCA and SVM dimensions disagree")
        return self.svm.decision_function(self.pca.project(features))

    def is_uninformative(self, frames: Sequence[Frame]) -> np.ndarray:
        if not frames:
            return np.zeros(0, dtype=bool)
        return self.decision(frame_features(frames, self.config)) >= 0.0


def filter_frames(frames: Sequence[Frame], model: FilterModel) -> list[Frame]:
    """Frames the model predicts informative, in input order."""
    frames = list(frames)
    if not frames:
        return []
    drop = model.is_uninformative(frames)
    return [f for f, d in zip(frames, drop) if not d]


@dataclass
class CrossValidation:
    best_C: float
    best_gamma: float
    fold_metrics: list[FilterMetrics]
    fold_ids: list[str]
    grid_f1: dict[tuple[float, float], float]

    @property
    def pooled(self) -> FilterMetrics:
        total = FilterMetrics(0, 0, 0, 0)
        for m in self.fold_metrics:
            total = total + m
        return total


def _intervention_data(interventions, cfg):
    data = []
    for iv in interventions:
        frames = labeled_frames(iv)
        if not frames:
            raise FilterError(f"intervention {iv.intervention_id} has no labeled frames")
        data.append((iv.intervention_id, frame_features(frames, cfg), frame_targets(frames)))
    return data


def cross_validate(
    interventions: Sequence[Intervention],
    C_grid: Sequence[float] = DEFAULT_C_GRID,
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    cfg: DescriptorConfig = DEFAULT_FILTER_CONFIG,
    variance: float | int = 0.95,
    *,
    features=None,
) -> CrossValidation:
    """Leave-one-intervention-out grid search over (C, gamma) on all descriptors.

    The winner maximizes the mean uninformative-class F1 across folds; ties go
    to the earlier grid point. ``features`` may pass precomputed
    ``(id, X, y)`` triples to skip extraction.
    """
    if len(interventions) < 2 and features is None:
        raise FilterError("cross-validation needs at least 2 interventions")
    data = features if features is not None else _intervention_data(interventions, cfg)
    if len(data) < 2:
        raise FilterError("cross-validation needs at least 2 interventions")

    grid = [(float(c), float(g)) for c in C_grid for g in gamma_grid]
    per_point: dict[tuple[float, float], list[FilterMetrics]] = {p: [] for p in grid}
    for k, (_, x_test, y_test) in enumerate(data):
        x_train = np.concatenate([d[1] for i, d in enumerate(data) if i != k])
        y_train = np.concatenate([d[2] for i, d in enumerate(data) if i != k])
        pca = fit_pca(x_train, variance)
        z_train, z_test = pca.project(x_train), pca.project(x_test)
        for c, g in grid:
            svm = train_svm(z_train, y_train, c, g)
            per_point[(c, g)].append(FilterMetrics.from_labels(y_test, svm.predict(z_test)))

    grid_f1 = {p: float(np.mean([m.f1 for m in ms])) for p, ms in per_point.items()}
    best = max(grid, key=lambda p: (grid_f1[p], -grid.index(p)))
    return CrossValidation(best[0], best[1], per_point[best], [d[0] for d in data], grid_f1)


@dataclass
class TrainedFilter:
    model: FilterModel
    repetition_f1: list[float]
    best_repetition: int


def train_filter(
    interventions: Sequence[Intervention],
    C: float,
    gamma: float,
    cfg: DescriptorConfig = DEFAULT_FILTER_CONFIG,
    *,
    fraction: float = 0.25,
    repetitions: int = 5,
    variance: float | int = 0.95,
    seed: int = 0,
    features=None,
) -> TrainedFilter:
    """Repeat k-means data selection, PCA and SVM training; keep the best held-out F1.

    Held-out samples are those not chosen as representatives in that
    repetition (all samples if every one was chosen).
    """
    data = features if features is not None else _intervention_data(interventions, cfg)
    x = np.concatenate([d[1] for d in data])
    y = np.concatenate([d[2] for d in data])
    classes = {1: np.flatnonzero(y > 0), -1: np.flatnonzero(y < 0)}
    if any(idx.size == 0 for idx in classes.values()):
        raise FilterError("training data must contain both classes")

    best: tuple[float, int, FilterModel] | None = None
    scores = []
    for rep in range(repetitions):
        picks = select_representatives({c: x[idx] for c, idx in classes.items()}, fraction, seed + rep)
        chosen = np.sort(np.concatenate([classes[c][picks[c]] for c in classes]))
        pca = fit_pca(x[chosen], variance)
        svm = train_svm(pca.project(x[chosen]), y[chosen], C, gamma)
        model = FilterModel(cfg, pca, svm)
        held = np.setdiff1d(np.arange(y.size), chosen)
        if held.size == 0:
            held = np.arange(y.size)
        f1 = FilterMetrics.from_labels(y[held], svm.predict(pca.project(x[held]))).f1
        scores.append(f1)
        if best is None or f1 > best[0]:
            best = (f1, rep, model)
    assert best is not None
    return TrainedFilter(best[2], scores, best[1])


# ---------------------------------------------------------------------------
# Persistence: header then little-endian float64 arrays
#   b"EVUF", u32 version, 32s fingerprint, u32 d, u32 m, u32 n_sv,
#   f64 gamma, f64 C, f64 bias, u32 config_json_len, config JSON,
#   mean[d], basis[d*m], explained_variance[m], support_vectors[n_sv*m], dual_coef[n_sv]
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"EVUF"
_MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sI32sIIIdddI")


def save_model(path: Path | str, model: FilterModel) -> None:
    pca, svm = model.pca, model.svm
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(
            _MODEL_HEADER.pack(
                _MODEL_MAGIC,
                _MODEL_VERSION,
                model.config.fingerprint.encode("ascii"),
                pca.input_dim,
                pca.dim,
                svm.support_vectors.shape[0],
                svm.gamma,
                svm.C,
                svm.bias,
                len(cfg_json),
            )
        )
        fh.write(cfg_json)
        for arr in (pca.mean, pca.basis, pca.explained_variance, svm.support_vectors, svm.dual_coef):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: Path | str, expected_fingerprint: str | None = None) -> FilterModel:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise FilterError(f"{path}: truncated model header")
    magic, version, fp, d, m, n_sv, gamma, C, bias, cfg_len = _MODEL_HEADER.unpack_from(data)
    if magic != _MODEL_MAGIC or version != _MODEL_VERSION:
        raise FilterError(f"{path}: not a filter model")
    fingerprint = fp.decode("ascii")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FilterError(f"{path}: model fingerprint {fingerprint} does not match {expected_fingerprint}")
    off = _MODEL_HEADER.size
    cfg = DescriptorConfig(**json.loads(data[off : off + cfg_len].decode("utf-8")))
    if cfg.fingerprint != fingerprint:
        raise FilterError(f"{path}: embedded config does not match header fingerprint")
    off += cfg_len
    sizes = [d, d * m, m, n_sv * m, n_sv]
    if len(data) != off + 8 * sum(sizes):
        raise FilterError(f"{path}: size does not match header")
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64))
        off += 8 * size
    mean, basis, var, sv, coef = arrays
    pca = PcaModel(mean, basis.reshape(d, m), var)
    svm = SvmModel(sv.reshape(n_sv, m), coef, bias, gamma, C)
    return FilterModel(cfg, pca, svm)
