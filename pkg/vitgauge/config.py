"""Run configuration: dataclass defaults, INI files and command-line overrides.

A config file holds one INI section per dataclass below plus a [run] section
for the global seed, worker count and output directory:

    [run]
    seed = 3
    [protocol]
    samples = 10
    seeds = 5
    [scale]
    budget = 2000000
    select = 1e6, 1.5e6
"""

import configparser
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from vitgauge.complexity import METRICS, EvalProtocol
from vitgauge.errors import ConfigurationError
from vitgauge.search import BASELINE_DECAY, LEARNING_RATE
from vitgauge.topology import ScaleSpec
from vitgauge.trainer import TrainConfig

OUT_DIR_ENV = "VITGAUGE_OUT_DIR"
DEFAULT_OUT_DIR = "runs"
SECTIONS = ("protocol", "search", "scale", "schedule", "train", "study")


@dataclass
class ProtocolConfig:
    samples: int = 10
    seeds: int = 5
    step_scale: float = 1e-3
    ntk_batch: int = 8
    input_res: int = 32
    conventional_length: bool = False

    def to_protocol(
        self,
        seed: int,
        seeds: Optional[int] = None,
        metrics: Tuple[str, ...] = METRICS,
    ) -> EvalProtocol:
        return EvalProtocol(
            samples=self.samples,
            seeds=seeds if seeds is not None else self.seeds,
            step_scale=self.step_scale,
            ntk_batch=self.ntk_batch,
            metrics=tuple(metrics),
            conventional_length=self.conventional_length,
            seed=seed,
        )


@dataclass
class SearchConfig:
    steps: int = 500
    learning_rate: float = LEARNING_RATE
    baseline_decay: float = BASELINE_DECAY
    width: int = 32
    depths: Tuple[int, ...] = (1, 1, 1, 1)
    seeds: int = 1
    rescore_top: int = 5
    log_every: int = 50

    @property
    def scale(self) -> ScaleSpec:
        return ScaleSpec(depths=tuple(self.depths), width=self.width)


@dataclass
class ScaleConfig:
    budget: int = 2_000_000
    width: int = 16
    seeds: int = 1
    random_scaling: bool = False
    runs: int = 10
    select: Tuple[float, ...] = ()


@dataclass
class ScheduleConfig:
    input_res: int = 256


@dataclass
class StudyConfig:
    topologies: int = 16
    width: int = 16
    dataset: str = "synthetic-shapes"
    root: str = ""
    classes: int = 4
    samples: int = 4096
    val_fraction: float = 0.2


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR)


@dataclass
class RunConfig:
    """Everything a command needs; serialised into every artifact."""

    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    seed: int = 0
    jobs: int = 1
    out_dir: str = field(default_factory=default_out_dir)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def override(self, section: Optional[str] = None, **values) -> "RunConfig":
        """Copy with non-None values replaced, in a section or at top level."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section is None:
            return replace(self, **values)
        return replace(self, **{section: replace(getattr(self, section), **values)})


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Read an INI file over the defaults; no path gives the defaults.

    Raises:
        ConfigError: For a missing file, unknown sections or keys, or values
            that do not parse as the field's type.
    """
    config = RunConfig()
    if path is None:
        return config
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"Malformed config file {path}: {e}") from e

    for name in parser.sections():
        if name == "run":
            values = _coerce_section(RunConfig, parser[name], skip=SECTIONS)
            config = replace(config, **values)
        elif name in SECTIONS:
            values = _coerce_section(type(getattr(config, name)), parser[name])
            config = config.override(name, **values)
        else:
            raise ConfigError(f"Unknown config section [{name}]")
    return config


def _coerce_section(cls, section: configparser.SectionProxy, skip: frozenset = frozenset()) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)} - set(skip)
    values = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"Unknown key '{key}' in section [{section.name}]")
        values[key] = _coerce(hints[key], raw, f"{section.name}.{key}")
    return values


def _coerce(kind, raw: str, where: str):
    try:
        if kind is bool:
            if raw.strip().lower() not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if kind is int:
            return _as_int(raw)
        if kind is float:
            return float(raw)
        if typing.get_origin(kind) is tuple:
            item = typing.get_args(kind)[0]
            convert = _as_int if item is int else item
            return tuple(convert(v) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"Invalid value for {where}: {e}") from e


def _as_int(raw: str) -> int:
    value = float(raw)
    if not value.is_integer():
        raise ValueError(f"not an integer: {raw!r}")
    return int(value)


class ConfigError(ConfigurationError):
    """Raised when a configuration file or override is invalid."""
