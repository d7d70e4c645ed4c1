"""Chi-squared ranking of k-EMNN candidates against a query frame."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Frame, MatchRecord
from .descriptors import DescriptorConfig, DescriptorVector, describe
from .localization import relative_roll, rotate_image

FrameRef = tuple[str, int]


class NoCandidatesError(LookupError):
    """No frames inside the search radius; callers fall back to the EM nearest neighbour."""


def chi_squared(h1: DescriptorVector | np.ndarray, h2: DescriptorVector | np.ndarray) -> float:
    """``0.5 * sum((a - b)^2 / (a + b))`` over bins where ``a + b > 0``."""
    if isinstance(h1, DescriptorVector) and isinstance(h2, DescriptorVector):
        if h1.config_fingerprint != h2.config_fingerprint:
            raise ValueError("descriptor fingerprints differ")
    a = h1.values if isinstance(h1, DescriptorVector) else np.asarray(h1, dtype=np.float64)
    b = h2.values if isinstance(h2, DescriptorVector) else np.asarray(h2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"descriptor lengths differ: {a.size} vs {b.size}")
    s = a + b
    mask = s > 0
    d = a[mask] - b[mask]
    return float(0.5 * np.sum(d * d / s[mask]))


class DescriptorCache:
    """In-memory descriptors keyed by (intervention, frame, config, roll bucket in degrees)."""

    def __init__(self):
        self._store: dict[tuple, DescriptorVector] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._store)

    def get(self, key, compute: Callable[[], DescriptorVector]) -> DescriptorVector:
        vec = self._store.get(key)
        if vec is None:
            self.misses += 1
            vec = self._store[key] = compute()
        else:
            self.hits += 1
        return vec


def roll_bucket(angle: float) -> int:
    """Nearest whole degree, used both as cache key and as the applied rotation."""
    return int(round(math.degrees(angle))) % 360


@dataclass(frozen=True)
class MatchReport:
    query: FrameRef
    candidates: tuple[tuple[FrameRef, float], ...]
    em_baseline: FrameRef
    config: DescriptorConfig
    radius: float

    def __post_init__(self):
        dists = [d for _, d in self.candidates]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise ValueError("candidate distances must be non-decreasing")
        if self.candidates and self.em_baseline not in {ref for ref, _ in self.candidates}:
            raise ValueError("EM baseline is not among the candidates")

    @property
    def best(self) -> FrameRef:
        return self.candidates[0][0]

    @property
    def k(self) -> int:
        return len(self.candidates)

    def to_records(self, scorer: Callable[[FrameRef, FrameRef], int] | None = None) -> list[MatchRecord]:
        return [
            MatchRecord(
                self.query[0],
                self.query[1],
                ref[0],
                ref[1],
                self.radius,
                rank,
                dist,
                scorer(self.query, ref) if scorer is not None else None,
            )
            for rank, (ref, dist) in enumerate(self.candidates, start=1)
        ]


def best_viewpoint(
    query: Frame,
    candidates: Sequence[Frame],
    cfg: DescriptorConfig,
    correct_roll: bool = True,
    *,
    query_intervention: str = "query",
    candidate_intervention: str = "db",
    radius: float = math.nan,
    em_baseline: Frame | None = None,
    cache: DescriptorCache | None = None,
) -> MatchReport:
    """Rank ``candidates`` by chi-squared distance to ``query``.

    ``candidates`` is expected in k-EMNN order, so its first element is the EM
    baseline unless ``em_baseline`` is given. With ``correct_roll`` each
    candidate is rotated by its relative roll to the query (rounded to whole
    degrees) before extraction. Raises ``NoCandidatesError`` on an empty list.
    """
    if not candidates:
        raise NoCandidatesError(f"no candidates for query frame {query.frame_id}")
    for c in candidates:
        if c.modality != query.modality:
            raise ValueError(f"candidate {c.frame_id} modality {c.modality.value} differs from query")
    cache = cache if cache is not None else DescriptorCache()
    fp = cfg.fingerprint

    q_vec = cache.get((query_intervention, query.frame_id, fp, None), lambda: describe(query.image, cfg))

    scored = []
    for cand in candidates:
        if correct_roll:
            bucket = roll_bucket(relative_roll(cand.pose, query.pose))
            angle = math.radians(bucket)

            def compute(c=cand, a=angle):
                return describe(rotate_image(c.image, a) if a else c.image, cfg)

        else:
            bucket = None

            def compute(c=cand):
                return describe(c.image, cfg)

        vec = cache.get((candidate_intervention, cand.frame_id, fp, bucket), compute)
        scored.append((chi_squared(q_vec, vec), cand.frame_id))
    scored.sort()

    baseline = em_baseline if em_baseline is not None else candidates[0]
    return MatchReport(
        (query_intervention, query.frame_id),
        tuple(((candidate_intervention, fid), dist) for dist, fid in scored),
        (candidate_intervention, baseline.frame_id),
        cfg,
        float(radius),
    )
