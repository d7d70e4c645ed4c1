"""Deterministic virtual esophagus: a textured tube seen by a forward-looking camera.

Two interventions of the same tube are sampled with independent depth
jitter, roll drift and tracker noise. The second one lives in a random
rigid tracker frame and carries the same six external landmarks, so pairing
them exercises landmark registration. Ground truth (true depth and roll of
every frame) scores any match as 2 / 1 / 0.
"""

from __future__ import annotations

import csv
import enum
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .dataset import Frame, Intervention, Label, Modality, Pose, load_intervention, save_intervention
from .localization import RigidTransform, roll_quaternion, wrap_angle

FOV_DEG = 120.0
MAX_VIEW_MM = 70.0
LIGHT_FALLOFF_MM = 25.0
MIP_LEVELS = 7
MIP_SIGMA0 = 0.6

LANDMARKS_MM = {
    "sternal_notch": (0.0, -60.0, 20.0),
    "xiphoid": (0.0, -90.0, 200.0),
    "left_shoulder": (-150.0, -20.0, 10.0),
    "right_shoulder": (150.0, -20.0, 10.0),
    "spine_t4": (0.0, 60.0, 60.0),
    "spine_t10": (0.0, 70.0, 230.0),
}


class Degradation(str, enum.Enum):
    NONE = "none"
    BLUR = "blur"
    CONTACT = "contact"
    MOTION = "motion"
    FLUID = "fluid"


UI_KINDS = (Degradation.BLUR, Degradation.CONTACT, Degradation.MOTION, Degradation.FLUID)


# ---------------------------------------------------------------------------
# Texture
# ---------------------------------------------------------------------------


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(n_axial: int, n_angular: int, cell: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth value noise on an ``(n_axial, n_angular)`` texel grid, periodic in angle.

    ``cell`` is the lattice spacing in texels; the angular lattice count is
    rounded so the field wraps exactly.
    """
    lat_ang = max(2, int(round(n_angular / cell)))
    lat_ax = int(math.ceil(n_axial / cell)) + 2
    lattice = rng.random((lat_ax, lat_ang))
    v = np.arange(n_axial) / cell
    u = np.arange(n_angular) * (lat_ang / n_angular)
    v0 = np.floor(v).astype(int)
    u0 = np.floor(u).astype(int)
    fv = _smoothstep(v - v0)[:, None]
    fu = _smoothstep(u - u0)[None, :]
    u1 = (u0 + 1) % lat_ang
    a = lattice[v0][:, u0]
    b = lattice[v0][:, u1]
    c = lattice[v0 + 1][:, u0]
    d = lattice[v0 + 1][:, u1]
    return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv


def fbm(n_axial, n_angular, cell, octaves, rng) -> np.ndarray:
    total = np.zeros((n_axial, n_angular))
    norm = 0.0
    for k in range(octaves):
        amp = 0.5**k
        total += amp * value_noise(n_axial, n_angular, cell / 2**k, rng)
        norm += amp
    return total / norm


_PALETTES = {
    # (mucosa low, mucosa high, vessel)
    Modality.NBI: ((0.20, 0.45, 0.42), (0.55, 0.80, 0.72), (0.30, 0.16, 0.10)),
    Modality.WL: ((0.70, 0.32, 0.28), (0.95, 0.62, 0.55), (0.55, 0.12, 0.12)),
}


@dataclass(frozen=True)
class TubeWorld:
    seed: int = 0
    modality: Modality = Modality.NBI
    radius_mm: float = 10.0
    length_mm: float = 250.0
    margin_mm: float = 80.0
    texel_mm: float = 0.25
    angular_texels: int = 256

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def axial_texels(self) -> int:
        return int(math.ceil((self.length_mm + 2 * self.margin_mm) / self.texel_mm)) + 1

    @functools.cached_property
    def texture(self) -> np.ndarray:
        """RGB texture in [0, 1], shape ``(axial, angular, 3)``."""
        rng = np.random.default_rng([self.seed, 7919])
        n_ax, n_ang = self.axial_texels, self.angular_texels
        mm = 1.0 / self.texel_mm
        low, high, vessel = (np.array(c) for c in _PALETTES[self.modality])
        if self.modality is Modality.NBI:
            base = fbm(n_ax, n_ang, 6.0 * mm, 3, rng)
            ridge = 1.0 - np.abs(2.0 * fbm(n_ax, n_ang, 3.0 * mm, 3, rng) - 1.0)
            veins = np.clip((ridge - 0.75) / 0.25, 0.0, 1.0) ** 1.5
            fine = fbm(n_ax, n_ang, 1.0 * mm, 2, rng)
            shade = np.clip(0.6 * base + 0.4 * fine, 0, 1)
            strength = 0.85
        else:
            base = fbm(n_ax, n_ang, 10.0 * mm, 3, rng)
            ridge = 1.0 - np.abs(2.0 * fbm(n_ax, n_ang, 5.0 * mm, 2, rng) - 1.0)
            veins = np.clip((ridge - 0.85) / 0.15, 0.0, 1.0) ** 2
            fine = fbm(n_ax, n_ang, 1.5 * mm, 2, rng)
            shade = np.clip(0.75 * base + 0.25 * fine, 0, 1)
            strength = 0.5
        mucosa = low + (high - low) * shade[..., None]
        tex = mucosa * (1.0 - strength * veins[..., None]) + vessel * (strength * veins[..., None])
        tex = np.clip(tex, 0.0, 1.0)
        tex.setflags(write=False)
        return tex

    def dominant_period_mm(self) -> float:
        return 6.0 if self.modality is Modality.NBI else 10.0

    @functools.cached_property
    def prefiltered(self) -> tuple[np.ndarray, ...]:
        """Texture blurred by Gaussians of ``MIP_SIGMA0 * 2**k`` texels, one per level."""
        out = []
        for k in range(MIP_LEVELS):
            sigma = MIP_SIGMA0 * 2**k
            tex = np.stack(
                [ndimage.gaussian_filter(self.texture[..., c], sigma, mode=("nearest", "wrap")) for c in range(3)],
                axis=-1,
            )
            tex.setflags(write=False)
            out.append(tex)
        return tuple(out)

    def sample(self, axial_mm: np.ndarray, angle: np.ndarray, level: int | None = None) -> np.ndarray:
        """Bilinear texture lookup at axial positions (mm) and angles (rad).

        ``level`` selects a prefiltered copy; ``None`` reads the raw texture.
        """
        tex = self.texture if level is None else self.prefiltered[level]
        a = np.clip((axial_mm + self.margin_mm) / self.texel_mm, 0.0, self.axial_texels - 1.0)
        b = np.mod(angle / (2.0 * math.pi) * self.angular_texels, self.angular_texels)
        a0 = np.minimum(np.floor(a).astype(int), self.axial_texels - 2)
        b0 = np.floor(b).astype(int) % self.angular_texels
        fa = (a - a0)[..., None]
        fb = (b - np.floor(b))[..., None]
        b1 = (b0 + 1) % self.angular_texels
        top = tex[a0, b0] * (1 - fb) + tex[a0, b1] * fb
        bot = tex[a0 + 1, b0] * (1 - fb) + tex[a0 + 1, b1] * fb
        return top * (1 - fa) + bot * fa

    def sample_filtered(self, axial_mm: np.ndarray, angle: np.ndarray, level: np.ndarray) -> np.ndarray:
        """Lookup blended between the two prefiltered copies bracketing a fractional ``level``."""
        level = np.clip(level, 0.0, MIP_LEVELS - 1.0)
        lo = np.floor(level).astype(int)
        frac = level - lo
        out = np.zeros(axial_mm.shape + (3,))
        for k in range(MIP_LEVELS):
            for sel, weight in ((lo == k, 1.0 - frac), ((lo + 1 == k) & (frac > 0), frac)):
                if sel.any():
                    out[sel] += weight[sel][:, None] * self.sample(axial_mm[sel], angle[sel], k)
        return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraSample:
    depth: float
    roll: float = 0.0
    degradation: Degradation = Degradation.NONE
    noise_seed: int = 0

    def __post_init__(self):
        # the upper bound depends on the world, so render() checks it
        if not (math.isfinite(self.depth) and self.depth >= 0.0):
            raise ValueError(f"depth must be a finite non-negative mm value, got {self.depth}")
        object.__setattr__(self, "degradation", Degradation(self.degradation))


@functools.lru_cache(maxsize=8)
def _camera_geometry(size: int, radius_mm: float):
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = cols - c, rows - c
    rho = np.hypot(dx, dy)
    focal = (size / 2.0) / math.tan(math.radians(FOV_DEG / 2.0))
    ahead = np.minimum(focal * radius_mm / np.maximum(rho, 1e-9), MAX_VIEW_MM)
    ray = np.sqrt(radius_mm**2 + ahead**2)
    gain = 1.15 / (1.0 + (ray / LIGHT_FALLOFF_MM) ** 2)
    rim = size / 2.0 - 3.0
    vignette = 1.0 - _smoothstep(np.clip((rho - 0.8 * rim) / (0.2 * rim), 0.0, 1.0))
    angle = np.arctan2(dy, dx)
    # texels covered by one pixel, axially (d ahead / d rho) or around the wall
    footprint_mm = np.maximum(np.where(ahead < MAX_VIEW_MM, ahead**2 / (focal * radius_mm), 0.0), radius_mm / np.maximum(rho, 1.0))
    shading = gain * vignette
    for arr in (ahead, angle, shading, vignette, footprint_mm):
        arr.setflags(write=False)
    return ahead, angle, shading, vignette, footprint_mm


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _line_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    for t in np.linspace(-c, c, 4 * length):
        k[int(round(c + t * math.sin(angle))), int(round(c + t * math.cos(angle)))] = 1.0
    return k / k.sum()


def _soft_mask(size: int, coverage: float, scale: float, rng: np.random.Generator, softness: float = 0.04):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), scale, mode="wrap")
    thresh = np.quantile(field_, 1.0 - coverage)
    spread = softness * (field_.max() - field_.min())
    return np.clip((field_ - thresh) / spread + 0.5, 0.0, 1.0)


def degrade(image: np.ndarray, kind: Degradation, rng: np.random.Generator) -> np.ndarray:
    """Apply an uninformative-frame degradation to a float RGB image in [0, 1]."""
    kind = Degradation(kind)
    if kind is Degradation.NONE:
        return image
    size = image.shape[0]
    if kind is Degradation.BLUR:
        return np.stack([ndimage.gaussian_filter(image[..., k], 6.0, mode="nearest") for k in range(3)], -1)
    if kind is Degradation.MOTION:
        kern = _line_kernel(15, rng.uniform(0, math.pi))
        return np.stack([ndimage.convolve(image[..., k], kern, mode="nearest") for k in range(3)], -1)
    if kind is Degradation.CONTACT:
        mask = _soft_mask(size, 0.70, size / 6.0, rng)[..., None]
        tint = np.array([0.78, 0.26, 0.22]) * rng.uniform(0.85, 1.0)
        shade = 1.0 + 0.03 * ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 8.0)[..., None]
        return image * (1.0 - mask) + tint * shade * mask
    if kind is Degradation.FLUID:
        mask = 0.85 * _soft_mask(size, 0.40, size / 16.0, rng, softness=0.15)[..., None]
        film = np.array([0.86, 0.88, 0.84]) * (0.9 + 0.1 * image.mean(axis=-1, keepdims=True))
        blurred = np.stack([ndimage.gaussian_filter(image[..., k], 2.0, mode="nearest") for k in range(3)], -1)
        return blurred * (1.0 - mask) + film * mask
    raise ValueError(kind)


def render(world: TubeWorld, cam: CameraSample, size: int = 128) -> np.ndarray:
    """8-bit RGB view from the tube axis at ``cam.depth`` looking down the tube."""
    if not 0.0 <= cam.depth <= world.length_mm:
        raise ValueError(f"depth {cam.depth} outside [0, {world.length_mm}]")
    ahead, angle, shading, vignette, footprint_mm = _camera_geometry(size, world.radius_mm)
    level = np.log2(np.maximum(footprint_mm / world.texel_mm, 1.0) * 3.5)
    color = world.sample_filtered(cam.depth + ahead, angle + cam.roll, level) * shading[..., None]
    if cam.degradation is not Degradation.NONE:
        rng = np.random.default_rng([world.seed, cam.noise_seed, 104729])
        color = degrade(color, cam.degradation, rng) * vignette[..., None]
    return _quantize(color)


# ---------------------------------------------------------------------------
# Paired interventions with ground truth
# ---------------------------------------------------------------------------

Ref = tuple[str, int]


@dataclass
class GroundTruth:
    depth: dict[Ref, float] = field(default_factory=dict)
    roll: dict[Ref, float] = field(default_factory=dict)
    degradation: dict[Ref, Degradation] = field(default_factory=dict)
    lambda_roll: float = 2.0  # mm per radian
    best_tolerance_mm: float = 0.5
    partial_band_mm: float = 5.0

    def cost(self, query: Ref, match: Ref) -> float:
        dz = abs(self.depth[match] - self.depth[query])
        return dz + self.lambda_roll * abs(wrap_angle(self.roll[match] - self.roll[query]))

    def informative(self, ref: Ref) -> bool:
        return self.degradation[ref] is Degradation.NONE

    def best_match(self, query: Ref, intervention_id: str) -> Ref:
        pool = [r for r in self.depth if r[0] == intervention_id and self.informative(r)]
        return min(pool, key=lambda r: (self.cost(query, r), r[1]))

    def score(self, query: Ref, match: Ref) -> int:
        """2 within ``best_tolerance_mm`` of the best cost, 1 within the depth band, else 0."""
        if not self.informative(match):
            return 0
        best = self.best_match(query, match[0])
        if match == best or self.cost(query, match) <= self.cost(query, best) + self.best_tolerance_mm:
            return 2
        if abs(self.depth[match] - self.depth[query]) <= self.partial_band_mm:
            return 1
        return 0

    def ground_truth_map(self, source_id: str, target_id: str) -> dict[int, int]:
        return {
            ref[1]: self.best_match(ref, target_id)[1] for ref in sorted(self.depth) if ref[0] == source_id
        }

    def save(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda_roll", repr(self.lambda_roll)])
            w.writerow(["best_tolerance_mm", repr(self.best_tolerance_mm)])
            w.writerow(["partial_band_mm", repr(self.partial_band_mm)])
            w.writerow(["intervention_id", "frame_id", "depth_mm", "roll_rad", "degradation"])
            for ref in sorted(self.depth):
                w.writerow([ref[0], ref[1], repr(self.depth[ref]), repr(self.roll[ref]), self.degradation[ref].value])

    @classmethod
    def load(cls, path: Path | str) -> "GroundTruth":
        gt = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            for row in reader:
                if row[0] == "intervention_id":
                    break
                setattr(gt, row[0], float(row[1]))
            for iid, fid, depth, roll, deg in reader:
                ref = (iid, int(fid))
                gt.depth[ref] = float(depth)
                gt.roll[ref] = float(roll)
                gt.degradation[ref] = Degradation(deg)
        return gt


@dataclass
class SyntheticPair:
    a: Intervention
    b: Intervention
    truth: GroundTruth
    world: TubeWorld
    b_frame: RigidTransform  # maps world (= A tracker space) into B's tracker space


def _random_transform(rng: np.random.Generator) -> RigidTransform:
    rot = Rotation.random(random_state=np.random.RandomState(int(rng.integers(2**31))))
    x, y, z, w = rot.as_quat()
    return RigidTransform(np.array([w, x, y, z]), rng.uniform(-200.0, 200.0, 3))


def _sample_intervention(
    world: TubeWorld,
    iid: str,
    subject: str,
    n_frames: int,
    rng: np.random.Generator,
    *,
    em_noise_sigma: float,
    landmark_noise: float,
    ui_fraction: float,
    depth_jitter: float,
    roll_drift: float,
    image_size: int,
    tracker: RigidTransform,
    truth: GroundTruth,
) -> Intervention:
    spacing = world.length_mm / (n_frames - 1)
    depths = np.arange(n_frames) * spacing + rng.uniform(-depth_jitter, depth_jitter, n_frames) * spacing
    depths = np.clip(depths, 0.0, world.length_mm)
    rolls = rng.uniform(-math.pi, math.pi) + np.cumsum(rng.normal(0.0, roll_drift, n_frames))
    noise = rng.normal(0.0, em_noise_sigma, (n_frames, 3)) if em_noise_sigma > 0 else np.zeros((n_frames, 3))

    kinds = [Degradation.NONE] * n_frames
    n_ui = int(round(ui_fraction * n_frames))
    if n_ui:
        for idx in rng.choice(n_frames, size=n_ui, replace=False):
            kinds[int(idx)] = UI_KINDS[int(rng.integers(len(UI_KINDS)))]

    frames = []
    for i in range(n_frames):
        roll = wrap_angle(float(rolls[i]))
        cam = CameraSample(float(depths[i]), roll, kinds[i], noise_seed=int(rng.integers(2**31)))
        image = render(world, cam, image_size)
        world_pose = Pose(np.array([0.0, 0.0, depths[i]]) + noise[i], roll_quaternion(roll), 0.1 * i)
        label = Label.INFORMATIVE if kinds[i] is Degradation.NONE else Label.UNINFORMATIVE
        frames.append(Frame(i, image, tracker.apply_pose(world_pose), world.modality, label))
        ref = (iid, i)
        truth.depth[ref] = float(depths[i])
        truth.roll[ref] = roll
        truth.degradation[ref] = kinds[i]

    marks = {}
    for name, xyz in LANDMARKS_MM.items():
        jitter = rng.normal(0.0, landmark_noise, 3) if landmark_noise > 0 else np.zeros(3)
        marks[name] = tracker.apply(np.array(xyz) + jitter)
    return Intervention(iid, tuple(frames), marks, subject)


def generate_pair(
    seed: int,
    n_frames: int = 100,
    em_noise_sigma: float = 5.0,
    *,
    modality: Modality | str = Modality.NBI,
    ui_fraction: float = 0.15,
    landmark_noise: float = 0.1,
    depth_jitter: float = 0.3,
    roll_drift: float = 0.05,
    image_size: int = 128,
    lambda_roll: float = 2.0,
    best_tolerance_mm: float = 0.5,
    partial_band_mm: float = 5.0,
) -> SyntheticPair:
    """Two interventions of one virtual esophagus plus ground truth.

    Intervention A is recorded in world coordinates, B in a random rigid
    tracker frame. ``depth_jitter`` is a fraction of the frame spacing and
    ``roll_drift`` the per-frame random-walk step in radians.
    """
    if n_frames < 20:
        raise ValueError("n_frames must be >= 20")
    world = TubeWorld(seed=seed, modality=Modality(modality))
    root = np.random.SeedSequence(seed)
    rng_a, rng_b, rng_t = (np.random.default_rng(s) for s in root.spawn(3))
    b_frame = _random_transform(rng_t)
    truth = GroundTruth(lambda_roll=lambda_roll, best_tolerance_mm=best_tolerance_mm, partial_band_mm=partial_band_mm)
    subject = f"synthetic-{seed}"
    common = dict(
        em_noise_sigma=em_noise_sigma,
        landmark_noise=landmark_noise,
        ui_fraction=ui_fraction,
        depth_jitter=depth_jitter,
        roll_drift=roll_drift,
        image_size=image_size,
        truth=truth,
    )
    a = _sample_intervention(world, f"s{seed}a", subject, n_frames, rng_a, tracker=RigidTransform.identity(), **common)
    b = _sample_intervention(world, f"s{seed}b", subject, n_frames, rng_b, tracker=b_frame, **common)
    return SyntheticPair(a, b, truth, world, b_frame)


def save_pair(pair: SyntheticPair, directory: Path | str) -> Path:
    """Write ``A/``, ``B/`` dataset directories and ``ground_truth.csv``."""
    directory = Path(directory)
    save_intervention(pair.a, directory / "A")
    save_intervention(pair.b, directory / "B")
    pair.truth.save(directory / "ground_truth.csv")
    return directory


def load_pair(directory: Path | str) -> tuple[Intervention, Intervention, GroundTruth | None]:
    directory = Path(directory)
    a = load_intervention(directory / "A")
    b = load_intervention(directory / "B")
    gt_path = directory / "ground_truth.csv"
    return a, b, GroundTruth.load(gt_path) if gt_path.is_file() else None
