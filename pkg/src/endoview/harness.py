"""Evaluation pipeline and score statistics.

A query is answered in two ways:

* EM-Based: the tracker nearest neighbour, i.e. the first k-EMNN frame.
* image-based: the k-EMNN frame with the smallest chi-squared descriptor
  distance to the query.

Frames flagged uninformative are removed from the database before the radius
search, so both answers come from the filtered set.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .colorspace import ColorSpace
from .dataset import Frame, Intervention, Label, ScoreRecord
from .descriptors import DescriptorConfig, Family
from .localization import (
    RigidTransform,
    SearchConfig,
    knn_within_radius,
    nearest_frame,
    register_interventions,
    transform_intervention,
)
from .matching import DescriptorCache, MatchReport, best_viewpoint
from .synthgen import GroundTruth
from .uifilter import FilterModel

EM_BASED = "EM-Based"
EM_POOL = "EM-pool"
NOT_APPLICABLE = "n.a."
STATS_COLUMNS = (
    "descriptor",
    "color_space",
    "radius_mm",
    "n",
    "avg_score",
    "std_dev",
    "pct_zeros",
    "pct_ones",
    "pct_twos",
)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComboStats:
    family: str
    space: str
    avg_score: float
    std_dev: float
    pct_zeros: float
    pct_ones: float
    pct_twos: float
    n: int
    radius_mm: float = math.nan

    def row(self) -> list:
        return [
            self.family,
            self.space,
            repr(float(self.radius_mm)),
            self.n,
            repr(self.avg_score),
            repr(self.std_dev),
            repr(self.pct_zeros),
            repr(self.pct_ones),
            repr(self.pct_twos),
        ]


def _scores(records: Iterable) -> list[int]:
    out = []
    for r in records:
        s = r.score if hasattr(r, "score") else r
        if s not in (0, 1, 2):
            raise ValueError(f"score must be 0, 1 or 2, got {s!r}")
        out.append(int(s))
    return out


def compute_stats(records: Iterable, family: str = "", space: str = "", radius_mm: float = math.nan) -> ComboStats:
    """Mean, sample standard deviation (n-1) and per-score percentages.

    ``records`` may be ``ScoreRecord``s or bare integer scores.
    """
    scores = _scores(records)
    if not scores:
        raise ValueError("no scores to summarize")
    n = len(scores)
    counts = [scores.count(k) for k in (0, 1, 2)]
    return ComboStats(
        family,
        space,
        sum(scores) / n,
        statistics.stdev(scores) if n > 1 else math.nan,
        100.0 * counts[0] / n,
        100.0 * counts[1] / n,
        100.0 * counts[2] / n,
        n,
        float(radius_mm),
    )


def retrieval_rate(records: Iterable) -> float:
    """Percentage of queries whose selected match scored 2."""
    scores = _scores(records)
    if not scores:
        raise ValueError("no scores")
    return 100.0 * scores.count(2) / len(scores)


def write_stats(rows: Sequence[ComboStats], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def read_stats(path: Path | str) -> list[ComboStats]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ComboStats(
                row["descriptor"],
                row["color_space"],
                float(row["avg_score"]),
                float(row["std_dev"]),
                float(row["pct_zeros"]),
                float(row["pct_ones"]),
                float(row["pct_twos"]),
                int(row["n"]),
                float(row["radius_mm"]),
            )
            for row in csv.DictReader(fh)
        ]


def read_score_file(path: Path | str, rank: int | None = 1) -> list[ScoreRecord]:
    """Scored rows from a results CSV; by default only the selected (rank 1) matches."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row.get("score", "") == "":
                continue
            if rank is not None and "rank" in row and int(row["rank"]) != rank:
                continue
            out.append(
                ScoreRecord(
                    (row["query_intervention"], int(row["query_frame"])),
                    (row["match_intervention"], int(row["match_frame"])),
                    int(row["score"]),
                    float(row.get("radius_mm") or "nan"),
                )
            )
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

Scorer = Callable[[tuple[str, int], tuple[str, int]], int]


@dataclass
class PreparedPair:
    """Query intervention plus the database registered into its tracker space."""

    query: Intervention
    database: Intervention
    available: list[Frame]
    transform: RigidTransform
    truth: GroundTruth | None = None
    cache: DescriptorCache = field(default_factory=DescriptorCache)

    def scorer(self) -> Scorer:
        if self.truth is None:
            raise ValueError("no ground truth to score against")
        return self.truth.score


def prepare_pair(
    query: Intervention,
    database: Intervention,
    truth: GroundTruth | None = None,
    ui_filter: FilterModel | str | None = None,
) -> PreparedPair:
    """Register ``database`` onto ``query`` by shared landmarks and drop uninformative frames.

    ``ui_filter`` is a trained model, ``"labels"`` to trust the manifest labels,
    or ``None`` to keep every frame.
    """
    transform = register_interventions(database, query)
    registered = transform_intervention(database, transform)
    frames = list(registered.frames)
    if isinstance(ui_filter, FilterModel):
        drop = ui_filter.is_uninformative(frames)
        frames = [f for f, d in zip(frames, drop) if not d]
    elif ui_filter == "labels":
        frames = [f for f in frames if f.informative_label is not Label.UNINFORMATIVE]
    elif ui_filter is not None:
        raise ValueError(f"unknown filter {ui_filter!r}")
    return PreparedPair(query, registered, frames, transform, truth)


def select_queries(intervention: Intervention, n: int = 9) -> list[Frame]:
    """``n`` frames at equally spaced positions along the trajectory's main axis.

    Positions are projected on the principal direction of the tracked
    trajectory; frames labeled uninformative are never chosen.
    """
    pool = [f for f in intervention.frames if f.informative_label is not Label.UNINFORMATIVE]
    if not pool:
        raise ValueError(f"{intervention.intervention_id}: no usable query frames")
    pos = np.stack([f.pose.position for f in pool])
    centred = pos - pos.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axis = vt[0]
    # orient along increasing time
    if np.dot(centred[-1] - centred[0], axis) < 0:
        axis = -axis
    t = centred @ axis
    targets = np.linspace(t.min(), t.max(), n)
    chosen: list[Frame] = []
    for target in targets:
        order = np.argsort(np.abs(t - target), kind="stable")
        for i in order:
            if pool[i] not in chosen:
                chosen.append(pool[i])
                break
    return chosen


@dataclass
class QueryOutcome:
    query: Frame
    radius: float
    candidates: list[Frame]
    em_match: Frame
    image_match: Frame
    report: MatchReport | None

    @property
    def k(self) -> int:
        return len(self.candidates)


def answer_query(
    prepared: PreparedPair,
    query: Frame,
    radius: float,
    cfg: DescriptorConfig,
    *,
    correct_roll: bool = True,
    max_k: int | None = None,
    position: np.ndarray | None = None,
) -> QueryOutcome:
    """Gross-localize then pick the best view-point among the k-EMNN frames.

    With no frame inside ``radius`` both answers fall back to the unbounded
    EM nearest neighbour.
    """
    pos = query.pose.position if position is None else position
    candidates = knn_within_radius(pos, prepared.available, SearchConfig(radius, max_k))
    if not candidates:
        fallback = nearest_frame(pos, prepared.available)
        return QueryOutcome(query, radius, [], fallback, fallback, None)
    report = best_viewpoint(
        query,
        candidates,
        cfg,
        correct_roll,
        query_intervention=prepared.query.intervention_id,
        candidate_intervention=prepared.database.intervention_id,
        radius=radius,
        cache=prepared.cache,
    )
    by_id = {f.frame_id: f for f in candidates}
    return QueryOutcome(query, radius, candidates, candidates[0], by_id[report.best[1]], report)


def _query_positions(queries: Sequence[Frame], noise_mm: float, seed: int) -> list[np.ndarray]:
    if noise_mm <= 0:
        return [q.pose.position for q in queries]
    rng = np.random.default_rng([seed, 31337])
    return [q.pose.position + rng.normal(0.0, noise_mm, 3) for q in queries]


@dataclass
class EvaluationRecords:
    """Scored outcomes of one method configuration at one radius."""

    image: list[ScoreRecord] = field(default_factory=list)
    em: list[ScoreRecord] = field(default_factory=list)
    pool: list[ScoreRecord] = field(default_factory=list)
    outcomes: list[QueryOutcome] = field(default_factory=list)


def evaluate(
    pairs: Sequence[PreparedPair],
    radius: float,
    cfg: DescriptorConfig,
    *,
    n_queries: int = 9,
    correct_roll: bool = True,
    max_k: int | None = None,
    query_noise_mm: float = 0.0,
    seed: int = 0,
) -> EvaluationRecords:
    """Run every query of every pair at ``radius`` and score against ground truth."""
    out = EvaluationRecords()
    for p_idx, prepared in enumerate(pairs):
        score = prepared.scorer()
        queries = select_queries(prepared.query, n_queries)
        positions = _query_positions(queries, query_noise_mm, seed + p_idx)
        qid, did = prepared.query.intervention_id, prepared.database.intervention_id
        for query, pos in zip(queries, positions):
            res = answer_query(prepared, query, radius, cfg, correct_roll=correct_roll, max_k=max_k, position=pos)
            qref = (qid, query.frame_id)
            out.outcomes.append(res)
            out.em.append(ScoreRecord(qref, (did, res.em_match.frame_id), score(qref, (did, res.em_match.frame_id)), radius))
            out.image.append(
                ScoreRecord(qref, (did, res.image_match.frame_id), score(qref, (did, res.image_match.frame_id)), radius)
            )
            for cand in res.candidates or [res.em_match]:
                out.pool.append(ScoreRecord(qref, (did, cand.frame_id), score(qref, (did, cand.frame_id)), radius))
    return out


def sweep_radius(
    pairs: Sequence[PreparedPair],
    radii: Sequence[float],
    cfg: DescriptorConfig,
    **kwargs,
) -> list[ComboStats]:
    """Per radius: image-based, EM-Based and EM-pool (all k-EMNN frames) statistics."""
    radii = list(radii)
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly ascending")
    rows = []
    for r in radii:
        ev = evaluate(pairs, r, cfg, **kwargs)
        rows.append(compute_stats(ev.image, cfg.family.value, cfg.space.value, r))
        rows.append(compute_stats(ev.em, EM_BASED, NOT_APPLICABLE, r))
        rows.append(compute_stats(ev.pool, EM_POOL, NOT_APPLICABLE, r))
    return rows


def sweep_combos(
    pairs: Sequence[PreparedPair],
    families: Sequence[Family | str],
    spaces: Sequence[ColorSpace | str],
    radius: float,
    base: DescriptorConfig | None = None,
    **kwargs,
) -> list[ComboStats]:
    """One row per descriptor/color-space pair plus EM-Based, best average first."""
    base = base or DescriptorConfig()
    rows = []
    em_row = None
    for fam in families:
        for space in spaces:
            cfg = DescriptorConfig(**{**base.to_dict(), "family": Family(fam), "space": ColorSpace(space)})
            ev = evaluate(pairs, radius, cfg, **kwargs)
            rows.append(compute_stats(ev.image, cfg.family.value, cfg.space.value, radius))
            if em_row is None:
                em_row = compute_stats(ev.em, EM_BASED, NOT_APPLICABLE, radius)
    if em_row is None:
        raise ValueError("empty descriptor grid")
    rows.append(em_row)
    return sorted(rows, key=lambda r: -r.avg_score)


def outcome_records(ev: EvaluationRecords, pairs: Sequence[PreparedPair]) -> list:
    """Full ranked candidate lists as result rows (rank 1 is the selected view)."""
    scorers = {p.query.intervention_id: p.scorer() for p in pairs}
    rows = []
    for res in ev.outcomes:
        if res.report is not None:
            rows.extend(res.report.to_records(scorers[res.report.query[0]]))
    return rows
