"""Topology search space, architecture specs and their document format."""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from vitgauge.errors import ConfigurationError

SCHEMA_VERSION = 1

# Search dimensions in policy order: stage by stage, then the head count.
DIMENSIONS = ("K1", "S1", "E1", "K2", "S2", "E2", "K3", "S3", "E3", "K4", "E4", "heads")

DEFAULT_CHOICES: Dict[str, Tuple[int, ...]] = {
    "K1": (4, 5, 6, 7, 8),
    "S1": (2, 4, 8),
    "E1": (2, 3, 4, 5, 6),
    "K2": (2, 3, 4),
    "S2": (1, 2, 4),
    "E2": (2, 3, 4, 5, 6),
    "K3": (2, 3, 4),
    "S3": (1, 2),
    "E3": (2, 3, 4, 5, 6),
    "K4": (2, 3, 4),
    "E4": (2, 3, 4, 5, 6),
    "heads": (16, 32, 64),
}

# Stage-1 embeds at 1/4 resolution, every later stage halves the grid.
STAGE_STRIDES = (4, 2, 2, 2)
NUM_STAGES = 4


@dataclass(frozen=True)
class TopologySpec:
    """The searchable topology choices.

    Attributes:
        kernels: Projection kernel sizes (K1, K2, K3, K4).
        splits: Attention window partitions per axis (S1, S2, S3); S4 is 1.
        expansions: FFN expansion ratios (E1, E2, E3, E4).
        heads: Stage-4 head count; stage i uses heads / 2**(4 - i).
    """

    kernels: Tuple[int, int, int, int]
    splits: Tuple[int, int, int]
    expansions: Tuple[int, int, int, int]
    heads: int

    @property
    def stage_splits(self) -> Tuple[int, int, int, int]:
        return tuple(self.splits) + (1,)

    @property
    def stage_heads(self) -> Tuple[int, int, int, int]:
        return tuple(max(1, self.heads // 2 ** (NUM_STAGES - 1 - i)) for i in range(NUM_STAGES))

    def to_choices(self) -> Dict[str, int]:
        """Flatten to the per-dimension mapping used by the search space."""
        values = {}
        for i in range(NUM_STAGES):
            values[f"K{i + 1}"] = int(self.kernels[i])
            values[f"E{i + 1}"] = int(self.expansions[i])
        for i in range(NUM_STAGES - 1):
            values[f"S{i + 1}"] = int(self.splits[i])
        values["heads"] = int(self.heads)
        return {name: values[name] for name in DIMENSIONS}

    @classmethod
    def from_choices(cls, choices: Mapping[str, int]) -> "TopologySpec":
        missing = [name for name in DIMENSIONS if name not in choices]
        if missing:
            raise TopologyError(f"Topology is missing fields: {', '.join(missing)}")
        return cls(
            kernels=tuple(int(choices[f"K{i}"]) for i in range(1, 5)),
            splits=tuple(int(choices[f"S{i}"]) for i in range(1, 4)),
            expansions=tuple(int(choices[f"E{i}"]) for i in range(1, 5)),
            heads=int(choices["heads"]),
        )


@dataclass(frozen=True)
class ScaleSpec:
    """Per-stage depths (L1..L4) and base width C."""

    depths: Tuple[int, int, int, int]
    width: int

    @property
    def stage_widths(self) -> Tuple[int, int, int, int]:
        return tuple(self.width * 2 ** i for i in range(NUM_STAGES))

    def to_dict(self) -> Dict[str, int]:
        values = {f"L{i + 1}": int(d) for i, d in enumerate(self.depths)}
        values["C"] = int(self.width)
        return values


@dataclass(frozen=True)
class SearchSpace:
    """Per-dimension choice lists, keyed by dimension name."""

    choices: Dict[str, Tuple[int, ...]] = field(default_factory=lambda: dict(DEFAULT_CHOICES))

    @property
    def dimensions(self) -> Tuple[str, ...]:
        return tuple(name for name in DIMENSIONS if name in self.choices)

    def cardinalities(self) -> List[int]:
        return [len(self.choices[name]) for name in self.dimensions]


SEED_TOPOLOGY = TopologySpec(kernels=(8, 4, 4, 4), splits=(2, 1, 1), expansions=(3, 2, 4, 6), heads=32)
SEED_SCALE = ScaleSpec(depths=(1, 1, 1, 1), width=32)


def validate(spec: TopologySpec, space: Optional[SearchSpace] = None) -> List[str]:
    """Check every field of a topology against its choice list.

    Args:
        spec: Topology to check.
        space: Search space; defaults to the full space.

    Returns:
        Names of out-of-range fields, e.g. ["K1"]. Empty when valid.
    """
    space = space or SearchSpace()
    try:
        values = spec.to_choices()
    except (IndexError, TypeError, ValueError):
        return list(DIMENSIONS)
    return [name for name in DIMENSIONS if values[name] not in DEFAULT_CHOICES[name]
            or (name in space.choices and values[name] not in space.choices[name])]


def validate_scale(scale: ScaleSpec, spec: TopologySpec) -> List[str]:
    """Check depths and width, including integral per-head dimensions."""
    problems = []
    if len(scale.depths) != NUM_STAGES:
        problems.append("depths must have four entries")
    for i, depth in enumerate(scale.depths):
        if depth < 1:
            problems.append(f"L{i + 1} must be >= 1")
    stage1_heads = spec.stage_heads[0]
    if scale.width < 1:
        problems.append("C must be positive")
    elif scale.width % stage1_heads:
        problems.append(f"C={scale.width} is not divisible by the stage-1 head count {stage1_heads}")
    return problems


def space_size(space: SearchSpace) -> int:
    """Number of distinct topologies in a search space."""
    return int(np.prod(space.cardinalities(), dtype=np.int64))


def sample_uniform(space: SearchSpace, seed) -> TopologySpec:
    """Draw every dimension independently and uniformly.

    Args:
        space: Search space to sample from; dimensions absent from the space
            take the seed topology's value.
        seed: Integer seed or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = SEED_TOPOLOGY.to_choices()
    for name in space.dimensions:
        options = space.choices[name]
        values[name] = int(options[rng.integers(len(options))])
    return TopologySpec.from_choices(values)


def spec_hash(spec: TopologySpec, scale: Optional[ScaleSpec] = None) -> str:
    """Short stable digest identifying an architecture."""
    payload = {"topology": spec.to_choices()}
    if scale is not None:
        payload["scale"] = scale.to_dict()
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def encode(spec: TopologySpec, scale: ScaleSpec, seed: int = 0) -> str:
    """Serialize an architecture to its JSON document."""
    document = {
        "topology": spec.to_choices(),
        "scale": scale.to_dict(),
        "meta": {"seed": int(seed), "schema_version": SCHEMA_VERSION},
    }
    return json.dumps(document, indent=2, sort_keys=False) + "\n"


def decode(document: str) -> Tuple[TopologySpec, ScaleSpec]:
    """Parse an architecture document.

    Raises:
        TopologyError: If the document is malformed, has missing or unknown
            fields, an unsupported schema version, or out-of-range values.
    """
    spec, scale, _ = decode_with_meta(document)
    return spec, scale


def decode_with_meta(document: str) -> Tuple[TopologySpec, ScaleSpec, Dict[str, int]]:
    """Like decode, but also return the meta block (seed, schema_version)."""
    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise TopologyError(f"Malformed architecture document: {e}") from e
    if not isinstance(data, dict):
        raise TopologyError("Architecture document must be a JSON object")

    # "config" is the run snapshot artifacts attach; it carries no architecture.
    _check_keys(data, {"topology", "scale", "meta"}, optional={"config"}, where="document")
    meta = data["meta"]
    _check_keys(meta, {"seed", "schema_version"}, where="meta")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise TopologyError(
            f"Unsupported schema_version {meta['schema_version']} (expected {SCHEMA_VERSION})"
        )

    _check_keys(data["topology"], set(DIMENSIONS), where="topology")
    _check_keys(data["scale"], {"L1", "L2", "L3", "L4", "C"}, where="scale")
    try:
        spec = TopologySpec.from_choices({k: _as_int(v, k) for k, v in data["topology"].items()})
        scale_data = data["scale"]
        scale = ScaleSpec(
            depths=tuple(_as_int(scale_data[f"L{i}"], f"L{i}") for i in range(1, 5)),
            width=_as_int(scale_data["C"], "C"),
        )
    except (TypeError, ValueError) as e:
        raise TopologyError(str(e)) from e

    bad = validate(spec)
    if bad:
        raise TopologyError(f"Out-of-range topology fields: {', '.join(bad)}")
    problems = validate_scale(scale, spec)
    if problems:
        raise TopologyError("; ".join(problems))
    return spec, scale, {"seed": _as_int(meta["seed"], "seed"), "schema_version": SCHEMA_VERSION}


def _check_keys(block, required: set, where: str, optional: set = frozenset()) -> None:
    if not isinstance(block, dict):
        raise TopologyError(f"'{where}' must be an object")
    missing = sorted(required - block.keys())
    if missing:
        raise TopologyError(f"'{where}' is missing fields: {', '.join(missing)}")
    unknown = sorted(block.keys() - required - set(optional))
    if unknown:
        raise TopologyError(f"'{where}' has unknown fields: {', '.join(unknown)}")


def _as_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TopologyError(f"Field {name} must be an integer, got {value!r}")
    return value


class TopologyError(ConfigurationError):
    """Raised when a topology, scale or architecture document is invalid."""
