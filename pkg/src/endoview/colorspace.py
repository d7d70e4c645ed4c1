"""Pixel-local conversions of 8-bit RGB frames into six color spaces.

Every conversion returns a :class:`PlanarImage` with channel-first float64
planes. Value ranges:

========  ======================================================
RGB       [0, 1] per channel
HSV       H = degrees/360, S, V in [0, 1] (hue treated as linear)
GS        [0, 1], luma 0.299 R + 0.587 G + 0.114 B
NORM      chromaticity r, g, b in [0, 1], summing to 1
LOG       ln(1 + I) / ln(256) in [0, 1]
OPP       O1 in [-1/sqrt2, 1/sqrt2], O2 in [-2/sqrt6, 2/sqrt6], O3 in [0, sqrt3]
========  ======================================================
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    HSV = "HSV"
    GS = "GS"
    NORM = "NORM"
    LOG = "LOG"
    OPP = "OPP"


@dataclass(frozen=True)
class PlanarImage:
    planes: np.ndarray  # (channels, height, width)
    space: ColorSpace

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim == 2:
            planes = planes[None]
        if planes.ndim != 3 or not 1 <= planes.shape[0] <= 3:
            raise ValueError(f"expected 1-3 planes, got shape {planes.shape}")
        if not np.all(np.isfinite(planes)):
            raise ValueError("planes contain NaN or Inf")
        planes = np.ascontiguousarray(planes)
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "space", ColorSpace(self.space))

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


def _split(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {rgb.shape}")
    f = rgb.astype(np.float64)
    return f[..., 0], f[..., 1], f[..., 2]


def to_rgb(rgb: np.ndarray) -> PlanarImage:
    r, g, b = _split(rgb)
    return PlanarImage(np.stack([r, g, b]) / 255.0, ColorSpace.RGB)


def to_grayscale(rgb: np.ndarray) -> PlanarImage:
    r, g, b = _split(rgb)
    return PlanarImage((0.299 * r + 0.587 * g + 0.114 * b) / 255.0, ColorSpace.GS)


def to_hsv(rgb: np.ndarray) -> PlanarImage:
    r, g, b = (c / 255.0 for c in _split(rgb))
    v = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = v - mn
    s = np.divide(delta, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(delta > 0, delta, 1.0)
    # hexcone sector by which channel is the maximum; red wins ties, then green
    h = np.where(
        v == r,
        np.mod((g - b) / safe, 6.0),
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    return PlanarImage(np.stack([h, s, v]), ColorSpace.HSV)


def to_normalized_rgb(rgb: np.ndarray) -> PlanarImage:
    r, g, b = _split(rgb)
    total = r + g + b
    black = total == 0
    denom = np.where(black, 1.0, total)
    planes = np.stack([r, g, b]) / denom
    planes[:, black] = 1.0 / 3.0
    return PlanarImage(planes, ColorSpace.NORM)


def to_log(rgb: np.ndarray) -> PlanarImage:
    r, g, b = _split(rgb)
    return PlanarImage(np.log1p(np.stack([r, g, b])) / np.log(256.0), ColorSpace.LOG)


def to_opponent(rgb: np.ndarray) -> PlanarImage:
    r, g, b = (c / 255.0 for c in _split(rgb))
    o1 = (r - g) / np.sqrt(2.0)
    o2 = (r + g - 2.0 * b) / np.sqrt(6.0)
    o3 = (r + g + b) / np.sqrt(3.0)
    return PlanarImage(np.stack([o1, o2, o3]), ColorSpace.OPP)


_CONVERTERS = {
    ColorSpace.RGB: to_rgb,
    ColorSpace.HSV: to_hsv,
    ColorSpace.GS: to_grayscale,
    ColorSpace.NORM: to_normalized_rgb,
    ColorSpace.LOG: to_log,
    ColorSpace.OPP: to_opponent,
}


def convert(rgb: np.ndarray, space: ColorSpace | str) -> PlanarImage:
    """Dispatch to the converter for ``space``."""
    return _CONVERTERS[ColorSpace(space)](rgb)


def channel_count(space: ColorSpace | str) -> int:
    return 1 if ColorSpace(space) is ColorSpace.GS else 3
