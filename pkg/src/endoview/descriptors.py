"""Multi-scale texture descriptors over a box-filter image pyramid.

Each family produces per-region histograms ("blocks") that are L1-normalized
and concatenated channel-major, then level, then region::

    for channel: for level: for cell: block

Families
--------
MLBP     256-bin raw LBP codes per grid cell
MLTP     upper and lower ternary patterns, two 256-bin blocks per cell
SWMLBP   LBP histograms over sliding windows instead of grid cells
MHOG     unsigned-orientation gradient histogram per cell
MLBPHOG  MLBP vector followed by the MHOG vector
DSIFT    4x4 subcells x 8 signed orientations per cell
MLIOP    histogram of circular intensity-order permutation codes per cell
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .colorspace import ColorSpace, PlanarImage, channel_count, convert

MIN_CELL = 8
LBP_BINS = 256
DSIFT_SUBCELLS = 4
DSIFT_BINS = 8

# clockwise from top-left as (dy, dx); bit i belongs to neighbor i
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


class DescriptorError(ValueError):
    pass


class Family(str, enum.Enum):
    MLBP = "MLBP"
    MHOG = "MHOG"
    SWMLBP = "SWMLBP"
    MLTP = "MLTP"
    MLBPHOG = "MLBPHOG"
    DSIFT = "DSIFT"
    MLIOP = "MLIOP"


@dataclass(frozen=True)
class DescriptorConfig:
    family: Family = Family.MLBP
    space: ColorSpace = ColorSpace.GS
    pyramid_levels: int = 3
    grid: int = 4
    sw_window: int = 64
    sw_stride: int = 32
    ltp_threshold: float = 5.0 / 255.0
    liop_neighbors: int = 4
    liop_radius: float = 3.0
    hog_bins: int = 9

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "space", ColorSpace(self.space))
        if self.pyramid_levels < 1:
            raise DescriptorError("pyramid_levels must be >= 1")
        if self.grid < 1:
            raise DescriptorError("grid must be >= 1")
        if self.sw_window < MIN_CELL or self.sw_stride < 1:
            raise DescriptorError("sliding window must be >= 8 px with positive stride")
        if self.ltp_threshold < 0:
            raise DescriptorError("ltp_threshold must be non-negative")
        if not 2 <= self.liop_neighbors <= 8:
            raise DescriptorError("liop_neighbors must lie in [2, 8]")
        if self.hog_bins < 2:
            raise DescriptorError("hog_bins must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        d["space"] = self.space.value
        return d

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:32]

    def level_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        shapes = [(height, width)]
        for _ in range(1, self.pyramid_levels):
            h, w = shapes[-1]
            shapes.append((h // 2, w // 2))
        return shapes

    def window_geometry(self, level: int) -> tuple[int, int]:
        """Sliding window side and stride at ``level`` (both halve per level)."""
        return self.sw_window >> level, max(1, self.sw_stride >> level)

    def check_fits(self, height: int, width: int) -> None:
        """Raise ``DescriptorError`` if the smallest pyramid level is too small."""
        last = self.pyramid_levels - 1
        h, w = self.level_shapes(height, width)[last]
        if self.family is Family.SWMLBP:
            win, _ = self.window_geometry(last)
            if win < MIN_CELL or win > min(h, w):
                raise DescriptorError(
                    f"image too small: {win}px window does not fit level {last} ({h}x{w}) with cells >= {MIN_CELL}px"
                )
        elif min(h, w) // self.grid < MIN_CELL:
            raise DescriptorError(
                f"image too small: {self.grid}x{self.grid} grid on level {last} ({h}x{w}) gives cells < {MIN_CELL}px"
            )


@dataclass(frozen=True)
class DescriptorVector:
    values: np.ndarray
    config_fingerprint: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def length(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def build_pyramid(plane: np.ndarray, levels: int) -> list[np.ndarray]:
    """Factor-2 box-filter pyramid; odd trailing rows/columns are dropped."""
    out = [np.asarray(plane, dtype=np.float64)]
    for _ in range(1, levels):
        p = out[-1]
        h, w = (p.shape[0] // 2) * 2, (p.shape[1] // 2) * 2
        p = p[:h, :w]
        out.append((p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]) * 0.25)
    return out


def _splits(size: int, parts: int) -> list[int]:
    return [(i * size) // parts for i in range(parts + 1)]


def grid_cells(height: int, width: int, grid: int) -> list[tuple[int, int, int, int]]:
    ys, xs = _splits(height, grid), _splits(width, grid)
    return [(ys[i], ys[i + 1], xs[j], xs[j + 1]) for i in range(grid) for j in range(grid)]


def sliding_windows(height: int, width: int, window: int, stride: int) -> list[tuple[int, int, int, int]]:
    ys = range(0, height - window + 1, stride)
    xs = range(0, width - window + 1, stride)
    return [(y, y + window, x, x + window) for y in ys for x in xs]


def _normalize(block: np.ndarray) -> np.ndarray:
    total = block.sum()
    return block / total if total > 0 else np.zeros_like(block)


# ---------------------------------------------------------------------------
# Per-pixel code maps
# ---------------------------------------------------------------------------


def lbp_code(patch) -> int:
    """LBP code of a 3x3 neighborhood: bit i set iff neighbor i >= center."""
    p = np.asarray(patch, dtype=np.float64).reshape(3, 3)
    center = p[1, 1]
    code = 0
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        if p[1 + dy, 1 + dx] >= center:
            code |= 1 << bit
    return code


def _neighbors(plane: np.ndarray):
    h, w = plane.shape
    padded = np.pad(plane, 1, mode="edge")
    for dy, dx in LBP_OFFSETS:
        yield padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]


def lbp_map(plane: np.ndarray) -> np.ndarray:
    """LBP code of every pixel, with edge-clamped neighbors."""
    codes = np.zeros(plane.shape, dtype=np.int64)
    for bit, nb in enumerate(_neighbors(plane)):
        codes |= (nb >= plane).astype(np.int64) << bit
    return codes


def ltp_maps(plane: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Upper (n >= c + t) and lower (n <= c - t) ternary pattern codes."""
    upper = np.zeros(plane.shape, dtype=np.int64)
    lower = np.zeros(plane.shape, dtype=np.int64)
    hi, lo = plane + threshold, plane - threshold
    for bit, nb in enumerate(_neighbors(plane)):
        upper |= (nb >= hi).astype(np.int64) << bit
        lower |= (nb <= lo).astype(np.int64) << bit
    return upper, lower


def central_gradients(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with edge clamping (x to the right, y down)."""
    padded = np.pad(plane, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return gx, gy


def orientation_bins(gx: np.ndarray, gy: np.ndarray, bins: int, signed: bool):
    """Linear interpolation of gradient orientation between adjacent bin centers.

    Returns ``(bin0, bin1, weight0, weight1)`` where weights already include
    the gradient magnitude.
    """
    period = 2.0 * math.pi if signed else math.pi
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), period)
    pos = theta / (period / bins) - 0.5
    base = np.floor(pos)
    frac = pos - base
    b0 = np.mod(base.astype(np.int64), bins)
    b1 = np.mod(b0 + 1, bins)
    return b0, b1, mag * (1.0 - frac), mag * frac


def liop_offsets(neighbors: int, radius: float) -> list[tuple[float, float]]:
    """Sample offsets ``(dy, dx)``, counter-clockwise from +x."""
    out = []
    for k in range(neighbors):
        phi = 2.0 * math.pi * k / neighbors
        out.append((round(-radius * math.sin(phi), 12) + 0.0, round(radius * math.cos(phi), 12) + 0.0))
    return out


def bilinear_sample(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = plane[y0, x0] * (1.0 - fx) + plane[y0, x1] * fx
    bottom = plane[y1, x0] * (1.0 - fx) + plane[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def permutation_index(order: np.ndarray) -> np.ndarray:
    """Lexicographic rank of each row of ``order`` among all permutations."""
    n = order.shape[-1]
    idx = np.zeros(order.shape[:-1], dtype=np.int64)
    for i in range(n):
        smaller = (order[..., i + 1 :] < order[..., i : i + 1]).sum(axis=-1)
        idx += smaller * math.factorial(n - 1 - i)
    return idx


def liop_map(plane: np.ndarray, neighbors: int, radius: float) -> np.ndarray:
    h, w = plane.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    samples = np.stack(
        [bilinear_sample(plane, yy + dy, xx + dx) for dy, dx in liop_offsets(neighbors, radius)], axis=-1
    )
    order = np.argsort(samples, axis=-1, kind="stable")
    return permutation_index(order)


# ---------------------------------------------------------------------------
# Block computation
# ---------------------------------------------------------------------------


def _count_blocks(codes: np.ndarray, regions, nbins: int) -> list[np.ndarray]:
    return [
        _normalize(np.bincount(codes[y0:y1, x0:x1].ravel(), minlength=nbins).astype(np.float64))
        for y0, y1, x0, x1 in regions
    ]


def _weighted_blocks(bins, regions, nbins: int) -> list[np.ndarray]:
    b0, b1, w0, w1 = bins
    out = []
    for y0, y1, x0, x1 in regions:
        hist = np.bincount(b0[y0:y1, x0:x1].ravel(), weights=w0[y0:y1, x0:x1].ravel(), minlength=nbins)
        hist = hist + np.bincount(b1[y0:y1, x0:x1].ravel(), weights=w1[y0:y1, x0:x1].ravel(), minlength=nbins)
        out.append(_normalize(hist))
    return out


def _dsift_blocks(bins, regions) -> list[np.ndarray]:
    b0, b1, w0, w1 = bins
    nbins = DSIFT_SUBCELLS * DSIFT_SUBCELLS * DSIFT_BINS
    out = []
    for y0, y1, x0, x1 in regions:
        h, w = y1 - y0, x1 - x0
        sub_y = np.searchsorted(_splits(h, DSIFT_SUBCELLS), np.arange(h), side="right") - 1
        sub_x = np.searchsorted(_splits(w, DSIFT_SUBCELLS), np.arange(w), side="right") - 1
        sub = (sub_y[:, None] * DSIFT_SUBCELLS + sub_x[None, :]) * DSIFT_BINS
        hist = np.bincount((sub + b0[y0:y1, x0:x1]).ravel(), weights=w0[y0:y1, x0:x1].ravel(), minlength=nbins)
        hist = hist + np.bincount((sub + b1[y0:y1, x0:x1]).ravel(), weights=w1[y0:y1, x0:x1].ravel(), minlength=nbins)
        out.append(_normalize(hist))
    return out


def _level_blocks(level_plane: np.ndarray, level: int, cfg: DescriptorConfig, family: Family) -> list[np.ndarray]:
    h, w = level_plane.shape
    if family is Family.SWMLBP:
        win, stride = cfg.window_geometry(level)
        return _count_blocks(lbp_map(level_plane), sliding_windows(h, w, win, stride), LBP_BINS)
    cells = grid_cells(h, w, cfg.grid)
    if family is Family.MLBP:
        return _count_blocks(lbp_map(level_plane), cells, LBP_BINS)
    if family is Family.MLTP:
        upper, lower = ltp_maps(level_plane, cfg.ltp_threshold)
        up = _count_blocks(upper, cells, LBP_BINS)
        lo = _count_blocks(lower, cells, LBP_BINS)
        return [b for pair in zip(up, lo) for b in pair]
    if family is Family.MHOG:
        gx, gy = central_gradients(level_plane)
        return _weighted_blocks(orientation_bins(gx, gy, cfg.hog_bins, signed=False), cells, cfg.hog_bins)
    if family is Family.DSIFT:
        gx, gy = central_gradients(level_plane)
        return _dsift_blocks(orientation_bins(gx, gy, DSIFT_BINS, signed=True), cells)
    if family is Family.MLIOP:
        codes = liop_map(level_plane, cfg.liop_neighbors, cfg.liop_radius)
        return _count_blocks(codes, cells, math.factorial(cfg.liop_neighbors))
    raise DescriptorError(f"no single-family blocks for {family}")


def _family_vector(image: PlanarImage, cfg: DescriptorConfig, family: Family) -> np.ndarray:
    blocks: list[np.ndarray] = []
    for c in range(image.channels):
        for level, plane in enumerate(build_pyramid(image.planes[c], cfg.pyramid_levels)):
            blocks.extend(_level_blocks(plane, level, cfg, family))
    return np.concatenate(blocks)


def extract(image: PlanarImage, cfg: DescriptorConfig) -> DescriptorVector:
    """Compute the descriptor of ``image`` for ``cfg``.

    Raises ``DescriptorError`` when the image is too small for the pyramid
    and grid in ``cfg``.
    """
    cfg.check_fits(image.height, image.width)
    if cfg.family is Family.MLBPHOG:
        values = np.concatenate(
            [_family_vector(image, cfg, Family.MLBP), _family_vector(image, cfg, Family.MHOG)]
        )
    else:
        values = _family_vector(image, cfg, cfg.family)
    return DescriptorVector(values, cfg.fingerprint)


def describe(rgb: np.ndarray, cfg: DescriptorConfig) -> DescriptorVector:
    """Convert an 8-bit RGB frame to ``cfg.space`` and extract."""
    return extract(convert(rgb, cfg.space), cfg)


def block_size(cfg: DescriptorConfig, family: Family | None = None) -> int:
    family = cfg.family if family is None else family
    return {
        Family.MLBP: LBP_BINS,
        Family.SWMLBP: LBP_BINS,
        Family.MLTP: LBP_BINS,
        Family.MHOG: cfg.hog_bins,
        Family.DSIFT: DSIFT_SUBCELLS * DSIFT_SUBCELLS * DSIFT_BINS,
        Family.MLIOP: math.factorial(cfg.liop_neighbors),
    }[family]


def vector_length(cfg: DescriptorConfig, channels: int | None = None, image_shape: tuple[int, int] | None = None) -> int:
    """Length of ``extract`` output for ``cfg``.

    ``channels`` defaults to the channel count of ``cfg.space``. The sliding
    window family also needs ``image_shape`` because the window count depends
    on the image size.
    """
    if channels is None:
        channels = channel_count(cfg.space)
    per_level_cells = cfg.grid * cfg.grid
    if cfg.family is Family.MLBPHOG:
        per_level = per_level_cells * (LBP_BINS + cfg.hog_bins)
        return channels * cfg.pyramid_levels * per_level
    if cfg.family is Family.MLTP:
        return channels * cfg.pyramid_levels * per_level_cells * 2 * LBP_BINS
    if cfg.family is Family.SWMLBP:
        if image_shape is None:
            raise DescriptorError("SWMLBP vector length depends on image_shape")
        total = 0
        for level, (h, w) in enumerate(cfg.level_shapes(*image_shape)):
            win, stride = cfg.window_geometry(level)
            total += len(sliding_windows(h, w, win, stride))
        return channels * total * LBP_BINS
    return channels * cfg.pyramid_levels * per_level_cells * block_size(cfg)


# ---------------------------------------------------------------------------
# Binary cache: b"EVDC", u32 version, 32-byte ASCII fingerprint, u32 length,
# u32 count, then count x (i64 frame_id, length x f32), all little-endian.
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"EVDC"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sI32sII")


def write_cache(path: Path | str, fingerprint: str, vectors: Mapping[int, DescriptorVector]) -> None:
    lengths = {v.length for v in vectors.values()}
    if len(lengths) > 1:
        raise DescriptorError("cache entries differ in length")
    if any(v.config_fingerprint != fingerprint for v in vectors.values()):
        raise DescriptorError("cache entry fingerprint mismatch")
    length = lengths.pop() if lengths else 0
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, fingerprint.encode("ascii"), length, len(vectors)))
        for fid in sorted(vectors):
            fh.write(struct.pack("<q", fid))
            fh.write(vectors[fid].values.astype("<f4").tobytes())


def read_cache(path: Path | str) -> tuple[str, dict[int, DescriptorVector]]:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise DescriptorError(f"{path}: truncated cache header")
    magic, version, fp, length, count = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise DescriptorError(f"{path}: not a descriptor cache")
    fingerprint = fp.decode("ascii")
    entry = 8 + 4 * length
    if len(data) != _CACHE_HEADER.size + count * entry:
        raise DescriptorError(f"{path}: size does not match header")
    out = {}
    off = _CACHE_HEADER.size
    for _ in range(count):
        (fid,) = struct.unpack_from("<q", data, off)
        vals = np.frombuffer(data, dtype="<f4", count=length, offset=off + 8).astype(np.float64)
        out[fid] = DescriptorVector(vals, fingerprint)
        off += entry
    return fingerprint, out
