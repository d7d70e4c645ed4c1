"""Pipeline settings and the ``section.key = value`` config file format.

Example::

    # endoview.conf
    seed = 42
    descriptor.family = MLBP
    descriptor.space = HSV
    search.radius_mm = 20
    search.radii_mm = 10, 20, 30, 40, 50, 60, 70
    uifilter.C_grid = 1, 10, 100
"""

from __future__ import annotations

import dataclasses
import enum
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .colorspace import ColorSpace
from .dataset import Modality
from .descriptors import DescriptorConfig, Family


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSettings:
    radius_mm: float = 20.0
    radii_mm: tuple[float, ...] = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0)
    max_k: typing.Optional[int] = None
    n_queries: int = 9
    correct_roll: bool = True
    # extra Gaussian noise on query positions, on top of tracker noise already in the data
    query_noise_mm: float = 0.0


@dataclass(frozen=True)
class SynthSettings:
    n_frames: int = 100
    em_noise_sigma: float = 5.0
    modality: Modality = Modality.NBI
    ui_fraction: float = 0.15
    landmark_noise: float = 0.1
    depth_jitter: float = 0.3
    roll_drift: float = 0.05
    image_size: int = 128
    lambda_roll: float = 2.0
    best_tolerance_mm: float = 0.5
    partial_band_mm: float = 5.0


@dataclass(frozen=True)
class FilterSettings:
    C_grid: tuple[float, ...] = (1.0, 10.0, 100.0)
    gamma_grid: tuple[float, ...] = (0.01, 0.1, 1.0)
    fraction: float = 0.25
    repetitions: int = 5
    variance: float = 0.95
    family: Family = Family.MLBP
    space: ColorSpace = ColorSpace.GS


@dataclass(frozen=True)
class SweepSettings:
    families: tuple[Family, ...] = tuple(Family)
    spaces: tuple[ColorSpace, ...] = tuple(ColorSpace)


@dataclass(frozen=True)
class Settings:
    seed: int = 42
    descriptor: DescriptorConfig = field(default_factory=lambda: DescriptorConfig(space=ColorSpace.HSV))
    search: SearchSettings = field(default_factory=SearchSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    uifilter: FilterSettings = field(default_factory=FilterSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def filter_descriptor(self) -> DescriptorConfig:
        return dataclasses.replace(self.descriptor, family=self.uifilter.family, space=self.uifilter.space)


def _coerce(raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, inner[0])
    if origin is tuple:
        return tuple(_coerce(part.strip(), args[0]) for part in raw.split(",") if part.strip())
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(raw.upper())
        except ValueError:
            raise ConfigError(f"{raw!r} is not one of {[m.value for m in hint]}") from None
    if hint in (int, float, str):
        try:
            return hint(raw)
        except ValueError:
            raise ConfigError(f"cannot read {raw!r} as {hint.__name__}") from None
    raise ConfigError(f"unsupported setting type {hint}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_settings(text: str, base: Settings | None = None) -> Settings:
    """Apply ``key = value`` lines to ``base`` (defaults when omitted)."""
    settings = base or Settings()
    updates: dict[str, dict] = {}
    top: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _hints(Settings) or section == "seed":
                raise ConfigError(f"line {line_no}: unknown section {section!r}")
            hints = _hints(type(getattr(settings, section)))
            if name not in hints:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            updates.setdefault(section, {})[name] = _coerce(value, hints[name])
        else:
            hints = _hints(Settings)
            if key not in hints or dataclasses.is_dataclass(hints[key]):
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            top[key] = _coerce(value, hints[key])
    for section, values in updates.items():
        top[section] = dataclasses.replace(getattr(settings, section), **values)
    return dataclasses.replace(settings, **top)


def load_settings(path: Path | str | None) -> Settings:
    if path is None:
        return Settings()
    return parse_settings(Path(path).read_text(encoding="utf-8"))


def dump_settings(settings: Settings) -> str:
    """Render every setting as ``key = value`` lines, readable by ``parse_settings``."""

    def fmt(v):
        if isinstance(v, enum.Enum):
            return v.value
        if isinstance(v, tuple):
            return ", ".join(fmt(x) for x in v)
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    lines = [f"seed = {settings.seed}"]
    for section in ("descriptor", "search", "synth", "uifilter", "sweep"):
        obj = getattr(settings, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
