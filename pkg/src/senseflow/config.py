"""Experiment configuration: TOML profiles and previous-run manifests."""

from __future__ import annotations

import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any

from .correct import CorrectionConfig
from .deform import MotionConfig
from .errors import ConfigError
from .estimate import EstimateConfig
from .models import MotionTiming, OperatorPath, PhantomKind
from .recon import ReconConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SENSEFLOW_OUTPUT_ROOT"
PROJECTORS = ("spline", "identity")

_SECTIONS: dict[str, type] = {
    "motion": MotionConfig,
    "recon": ReconConfig,
    "estimate": EstimateConfig,
    "correct": CorrectionConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    seed: int = 42
    n: int = 64
    n_spokes: int = 128
    n_readout: int = 0            # 0 selects n samples per spoke
    n_exc: int = 8
    n_coils: int = 4
    phantom: PhantomKind = PhantomKind.SHEPP_LOGAN
    noise_level: float = 0.0
    sampling: OperatorPath = OperatorPath.DFFT
    motion_timing: MotionTiming = MotionTiming.EXCITATION
    dcf_iters: int = 10
    projector: str = "spline"
    output: str = "runs"
    motion: MotionConfig = field(default_factory=MotionConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    correct: CorrectionConfig = field(default_factory=CorrectionConfig)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "phantom", PhantomKind(self.phantom))
            object.__setattr__(self, "sampling", OperatorPath(self.sampling))
            object.__setattr__(self, "motion_timing", MotionTiming(self.motion_timing))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n < 8 or self.n % 2:
            raise ConfigError(f"n must be an even integer >= 8, got {self.n}")
        if self.n_spokes < 1 or self.n_exc < 1 or self.n_coils < 1:
            raise ConfigError("n_spokes, n_exc and n_coils must be positive")
        if self.n_spokes % self.n_exc:
            raise ConfigError(f"{self.n_spokes} spokes do not split into {self.n_exc} excitations")
        if self.n_readout < 0:
            raise ConfigError(f"n_readout must be >= 0, got {self.n_readout}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must lie in [0, 2^64), got {self.seed}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.projector not in PROJECTORS:
            raise ConfigError(f"projector must be one of {PROJECTORS}, got {self.projector!r}")
        if self.n >> self.correct.levels < 8:
            raise ConfigError(f"{self.correct.levels} correction levels leave fewer than 8 pixels")

    @property
    def readout(self) -> int:
        return self.n_readout or self.n

    @property
    def spokes_per_excitation(self) -> int:
        return self.n_spokes // self.n_exc

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output)

    def run_dir(self) -> Path:
        return self.output_root() / self.name

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def replace(self, **changes) -> ExperimentConfig:
        """Copy with top-level or ``section.key`` overrides, validated like a file."""
        data = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.rpartition(".")
            (data.setdefault(section, {}) if section else data)[name] = value
        return from_dict(data)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls: type, values: dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    sections = {}
    for name, cls in _SECTIONS.items():
        table = data.pop(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build(cls, table, f"[{name}]")
    return _build(ExperimentConfig, {**data, **sections}, "experiment config")


def load_config(path: Path) -> ExperimentConfig:
    """Load a TOML profile, or the ``config`` object of a run's manifest.json."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            data = json.loads(text).get("config")
        except (json.JSONDecodeError, AttributeError) as exc:
            raise ConfigError(f"{path} is not a run manifest: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} carries no config object")
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    config = from_dict(data)
    logger.debug("loaded config %s from %s", config.name, path)
    return config
