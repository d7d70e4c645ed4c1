"""Gross-localization: landmark registration, radius-bounded EM neighbours, roll correction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .dataset import Frame, Intervention, Pose

DEGENERACY_TOL = 1e-9


class RegistrationError(ValueError):
    """Landmark configuration does not determine a rotation."""


def _to_scipy(q_wxyz) -> Rotation:
    w, x, y, z = np.asarray(q_wxyz, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w])


def _from_scipy(rot: Rotation) -> np.ndarray:
    x, y, z, w = rot.as_quat()
    q = np.array([w, x, y, z])
    # canonical sign keeps round trips stable
    return -q if w < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product of ``(w, x, y, z)`` quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def roll_quaternion(angle: float) -> np.ndarray:
    """Rotation by ``angle`` about local +z."""
    return np.array([math.cos(angle / 2.0), 0.0, 0.0, math.sin(angle / 2.0)])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # mm

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-9:
            q = q / norm
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation) -> "RigidTransform":
        return cls(_from_scipy(Rotation.from_matrix(rotation)), translation)

    @property
    def matrix(self) -> np.ndarray:
        return _to_scipy(self.rotation).as_matrix()

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.translation

    def inverse(self) -> "RigidTransform":
        r_inv = quat_conjugate(self.rotation)
        return RigidTransform(r_inv, -(_to_scipy(r_inv).as_matrix() @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            quat_multiply(self.rotation, other.rotation),
            self.matrix @ other.translation + self.translation,
        )

    def apply_pose(self, pose: Pose) -> Pose:
        q = quat_multiply(self.rotation, pose.orientation)
        return Pose(self.apply(pose.position), q / np.linalg.norm(q), pose.timestamp)

    def rotation_angle(self) -> float:
        return float(_to_scipy(self.rotation).magnitude())


@dataclass(frozen=True)
class SearchConfig:
    radius: float = 20.0
    max_k: int | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("search radius must be positive")
        if self.max_k is not None and self.max_k < 1:
            raise ValueError("max_k must be >= 1")


def register_landmarks(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` points onto ``target``.

    Closed form from the SVD of the cross-covariance of the centred point
    sets; a reflection is never returned.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise RegistrationError(f"need matching (n, 3) point sets, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise RegistrationError(f"need at least 3 point pairs, got {src.shape[0]}")
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    a = src - src_c
    b = dst - dst_c
    sv = np.linalg.svd(a, compute_uv=False)
    condition = sv[1] / sv[0] if sv[0] > 0 else 0.0
    if condition < DEGENERACY_TOL:
        raise RegistrationError(
            f"degenerate (collinear or coincident) landmarks: singular value ratio {condition:.3e}"
        )
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return RigidTransform.from_matrix(rot, dst_c - rot @ src_c)


def landmark_pairs(source: Mapping[str, np.ndarray], target: Mapping[str, np.ndarray]):
    """Stack landmarks present in both maps, matched by name (sorted)."""
    names = sorted(set(source) & set(target))
    if len(names) < 3:
        raise RegistrationError(f"only {len(names)} landmarks shared between interventions")
    return np.stack([source[n] for n in names]), np.stack([target[n] for n in names])


def register_interventions(moving: Intervention, fixed: Intervention) -> RigidTransform:
    """Transform mapping ``moving``'s tracker space into ``fixed``'s."""
    return register_landmarks(*landmark_pairs(moving.landmarks, fixed.landmarks))


def transform_intervention(intervention: Intervention, transform: RigidTransform) -> Intervention:
    frames = tuple(
        Frame(f.frame_id, f.image, transform.apply_pose(f.pose), f.modality, f.informative_label)
        for f in intervention.frames
    )
    marks = {k: transform.apply(v) for k, v in intervention.landmarks.items()}
    return Intervention(intervention.intervention_id, frames, marks, intervention.subject_id)


def knn_within_radius(query, trajectory: Intervention | Sequence[Frame], cfg: SearchConfig) -> list[Frame]:
    """Frames within ``cfg.radius`` of ``query``, nearest first.

    Ties are broken by timestamp, then frame id. The first element is the EM
    nearest neighbour; an empty list means nothing lies inside the radius.
    """
    frames = trajectory.frames if isinstance(trajectory, Intervention) else tuple(trajectory)
    if not frames:
        return []
    q = np.asarray(query, dtype=np.float64).reshape(3)
    pos = np.stack([f.pose.position for f in frames])
    d = pos - q
    # hypot avoids squaring tiny offsets down to zero
    dist = np.hypot(np.hypot(d[:, 0], d[:, 1]), d[:, 2])
    hits = [(float(dist[i]), frames[i].pose.timestamp, frames[i].frame_id, i) for i in np.flatnonzero(dist <= cfg.radius)]
    hits.sort()
    if cfg.max_k is not None:
        hits = hits[: cfg.max_k]
    return [frames[i] for *_, i in hits]


def nearest_frame(query, trajectory: Intervention | Sequence[Frame]) -> Frame:
    """Unbounded EM nearest neighbour."""
    frames = trajectory.frames if isinstance(trajectory, Intervention) else tuple(trajectory)
    hit = knn_within_radius(query, frames, SearchConfig(radius=math.inf, max_k=1))
    return hit[0]


def wrap_angle(angle: float) -> float:
    """Map to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def relative_roll(a: Pose, b: Pose) -> float:
    """Twist of ``a^-1 b`` about the optical axis (local +z), in (-pi, pi]."""
    rel = quat_multiply(quat_conjugate(a.orientation), b.orientation)
    w, _, _, z = rel
    if w == 0.0 and z == 0.0:
        return 0.0
    return wrap_angle(2.0 * math.atan2(z, w))


def rotate_image(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling and edge clamping.

    Output pixel ``p`` samples the input at ``c + R(angle) (p - c)`` in
    (column, row) coordinates, so rotating a frame by the relative roll of two
    poses aligns it with the second pose's view. Dimensions and dtype are kept.
    """
    img = np.asarray(image)
    if angle == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = cols - cx, rows - cy
    src_x = cx + c * dx - s * dy
    src_y = cy + s * dx + c * dy
    coords = np.stack([src_y, src_x])

    def _one(plane):
        out = ndimage.map_coordinates(plane.astype(np.float64), coords, order=1, mode="nearest")
        if np.issubdtype(img.dtype, np.integer):
            info = np.iinfo(img.dtype)
            return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
        return out.astype(img.dtype)

    if img.ndim == 2:
        return _one(img)
    return np.stack([_one(img[..., k]) for k in range(img.shape[2])], axis=-1)
