"""Data model for interventions and the on-disk dataset format.

An intervention is stored as one UTF-8 manifest (header block followed by a
frame table) plus lossless PNG images next to it::

    intervention_id,A
    subject_id,synthetic-42
    modality,NBI
    landmark,sternal_notch,12.5,-80.0,3.25
    frame_id,timestamp,image_file,x,y,z,qw,qx,qy,qz,label
    0,0.0,frames/000000.png,0.1,-0.2,0.0,1.0,0.0,0.0,0.0,informative
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.csv"
FRAME_COLUMNS = ("frame_id", "timestamp", "image_file", "x", "y", "z", "qw", "qx", "qy", "qz", "label")
RESULT_COLUMNS = (
    "query_intervention",
    "query_frame",
    "match_intervention",
    "match_frame",
    "radius_mm",
    "rank",
    "distance",
    "score",
)
QUAT_TOL = 1e-6
MIN_IMAGE_SIDE = 32


class DatasetError(ValueError):
    """Raised for malformed manifests or records violating the data model."""


class Modality(str, enum.Enum):
    NBI = "NBI"
    WL = "WL"


class Label(str, enum.Enum):
    INFORMATIVE = "informative"
    UNINFORMATIVE = "uninformative"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    """Tracker sample: position in mm and unit quaternion ``(w, x, y, z)``."""

    position: np.ndarray
    orientation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        quat = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(pos)):
            raise DatasetError(f"non-finite position {pos}")
        norm = float(np.linalg.norm(quat))
        if not math.isfinite(norm) or abs(norm - 1.0) > QUAT_TOL:
            raise DatasetError(f"non-unit quaternion (norm {norm!r})")
        object.__setattr__(self, "position", _readonly(pos))
        object.__setattr__(self, "orientation", _readonly(quat))
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class Frame:
    frame_id: int
    image: np.ndarray
    pose: Pose
    modality: Modality
    informative_label: Label | None = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise DatasetError(f"frame {self.frame_id}: image must be uint8 HxWx3, got {img.dtype} {img.shape}")
        if img.shape[0] < MIN_IMAGE_SIDE or img.shape[1] < MIN_IMAGE_SIDE:
            raise DatasetError(f"frame {self.frame_id}: image smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
        object.__setattr__(self, "frame_id", int(self.frame_id))
        object.__setattr__(self, "image", _readonly(img))
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.informative_label is not None:
            object.__setattr__(self, "informative_label", Label(self.informative_label))

    @property
    def is_uninformative(self) -> bool:
        return self.informative_label is Label.UNINFORMATIVE


@dataclass(frozen=True)
class Intervention:
    intervention_id: str
    frames: tuple[Frame, ...]
    landmarks: dict[str, np.ndarray] = field(default_factory=dict)
    subject_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise DatasetError("empty intervention")
        ids = [f.frame_id for f in frames]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate frame id")
        stamps = [f.pose.timestamp for f in frames]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise DatasetError("frame timestamps are not strictly increasing")
        if len({f.modality for f in frames}) != 1:
            raise DatasetError("modality varies within intervention")
        marks = {str(k): _readonly(np.asarray(v, dtype=np.float64).reshape(3)) for k, v in self.landmarks.items()}
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "landmarks", marks)

    @property
    def modality(self) -> Modality:
        return self.frames[0].modality

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def positions(self) -> np.ndarray:
        return np.stack([f.pose.position for f in self.frames])

    def subset(self, frames: Iterable[Frame]) -> "Intervention":
        return Intervention(self.intervention_id, tuple(frames), self.landmarks, self.subject_id)


@dataclass(frozen=True)
class ScoreRecord:
    query_frame: tuple[str, int]
    matched_frame: tuple[str, int]
    score: int
    radius: float

    def __post_init__(self):
        if self.score not in (0, 1, 2):
            raise DatasetError(f"score must be 0, 1 or 2, got {self.score!r}")


@dataclass(frozen=True)
class MatchRecord:
    """One row of the results CSV: a ranked candidate for a query."""

    query_intervention: str
    query_frame: int
    match_intervention: str
    match_frame: int
    radius_mm: float
    rank: int
    distance: float
    score: int | None = None

    def to_score_record(self) -> ScoreRecord:
        if self.score is None:
            raise DatasetError("record carries no score")
        return ScoreRecord(
            (self.query_intervention, self.query_frame),
            (self.match_intervention, self.match_frame),
            self.score,
            self.radius_mm,
        )


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _resolve_manifest(path: Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_intervention(manifest_path: Path | str) -> Intervention:
    """Read a manifest and its PNG frames.

    Frames are returned ordered by timestamp. Raises ``FileNotFoundError`` for
    missing files and ``DatasetError`` for anything malformed.
    """
    manifest = _resolve_manifest(Path(manifest_path))
    if not manifest.is_file():
        raise FileNotFoundError(manifest)
    root = manifest.parent

    header: dict[str, str] = {}
    landmarks: dict[str, np.ndarray] = {}
    rows: list[list[str]] = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        in_table = False
        for line_no, row in enumerate(reader, start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            if in_table:
                rows.append(row)
                continue
            key = row[0].strip()
            if key == "frame_id":
                if tuple(c.strip() for c in row) != FRAME_COLUMNS:
                    raise DatasetError(f"{manifest}:{line_no}: unexpected frame table columns {row}")
                in_table = True
            elif key == "landmark":
                if len(row) != 5:
                    raise DatasetError(f"{manifest}:{line_no}: landmark needs name,x,y,z")
                try:
                    landmarks[row[1]] = np.array([float(v) for v in row[2:5]])
                except ValueError as exc:
                    raise DatasetError(f"{manifest}:{line_no}: {exc}") from None
            elif len(row) == 2:
                header[key] = row[1].strip()
            else:
                raise DatasetError(f"{manifest}:{line_no}: cannot parse header line {row}")

    for key in ("intervention_id", "subject_id", "modality"):
        if key not in header:
            raise DatasetError(f"{manifest}: missing header field {key!r}")
    if not in_table:
        raise DatasetError(f"{manifest}: missing frame table")
    if not rows:
        raise DatasetError("empty intervention")
    try:
        modality = Modality(header["modality"])
    except ValueError:
        raise DatasetError(f"{manifest}: unknown modality {header['modality']!r}") from None

    parsed = []
    for row in rows:
        if len(row) != len(FRAME_COLUMNS):
            raise DatasetError(f"{manifest}: frame row has {len(row)} cells: {row}")
        rec = dict(zip(FRAME_COLUMNS, (c.strip() for c in row)))
        try:
            fid = int(rec["frame_id"])
            ts = float(rec["timestamp"])
            pos = [float(rec[k]) for k in ("x", "y", "z")]
            quat = [float(rec[k]) for k in ("qw", "qx", "qy", "qz")]
        except ValueError as exc:
            raise DatasetError(f"{manifest}: {exc}") from None
        label = Label(rec["label"]) if rec["label"] else None
        parsed.append((fid, ts, rec["image_file"], pos, quat, label))

    ids = [p[0] for p in parsed]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate frame id")
    stamps = [p[1] for p in parsed]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise DatasetError("frame timestamps are not strictly increasing")

    frames = []
    for fid, ts, image_file, pos, quat, label in parsed:
        image_path = root / image_file
        if not image_path.is_file():
            raise FileNotFoundError(image_path)
        pose = Pose(pos, quat, ts)
        frames.append(Frame(fid, load_image(image_path), pose, modality, label))
    return Intervention(header["intervention_id"], tuple(frames), landmarks, header["subject_id"])


def save_intervention(intervention: Intervention, directory: Path | str) -> Path:
    """Write ``manifest.csv`` plus ``frames/<id>.png`` under ``directory``."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["intervention_id", intervention.intervention_id])
        w.writerow(["subject_id", intervention.subject_id])
        w.writerow(["modality", intervention.modality.value])
        for name, xyz in intervention.landmarks.items():
            w.writerow(["landmark", name, *(repr(float(v)) for v in xyz)])
        w.writerow(FRAME_COLUMNS)
        for f in intervention.frames:
            rel = f"frames/{f.frame_id:06d}.png"
            save_image(directory / rel, f.image)
            label = f.informative_label.value if f.informative_label is not None else ""
            w.writerow(
                [f.frame_id, repr(f.pose.timestamp), rel]
                + [repr(float(v)) for v in f.pose.position]
                + [repr(float(v)) for v in f.pose.orientation]
                + [label]
            )
    return manifest


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------


def _records(items: Iterable) -> list[MatchRecord]:
    out: list[MatchRecord] = []
    for item in items:
        if isinstance(item, MatchRecord):
            out.append(item)
        elif hasattr(item, "to_records"):
            out.extend(item.to_records())
        else:
            raise TypeError(f"cannot write {type(item).__name__} as a result row")
    return out


def save_results(records: Sequence, out_path: Path | str) -> None:
    """Write result rows (``MatchRecord`` or anything with ``to_records()``).

    Floats are written in shortest round-trip form so reading the file back
    reproduces the records exactly.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in _records(records):
            w.writerow(
                [
                    r.query_intervention,
                    r.query_frame,
                    r.match_intervention,
                    r.match_frame,
                    repr(float(r.radius_mm)),
                    r.rank,
                    repr(float(r.distance)),
                    "" if r.score is None else r.score,
                ]
            )


def load_results(path: Path | str) -> list[MatchRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise DatasetError(f"{path}: unexpected result columns {reader.fieldnames}")
        return [
            MatchRecord(
                row["query_intervention"],
                int(row["query_frame"]),
                row["match_intervention"],
                int(row["match_frame"]),
                float(row["radius_mm"]),
                int(row["rank"]),
                float(row["distance"]),
                int(row["score"]) if row["score"] != "" else None,
            )
            for row in reader
        ]
