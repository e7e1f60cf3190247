"""Progressive re-tokenization of the first projection.

Early training can run on fewer tokens by enlarging the stride of the first
projection and dilating its kernel to keep the receptive field, without
touching any weight. A schedule walks from coarse to full resolution.

Reduction factors divide the token count. Factor f uses per-axis stride
multiples of S1 taken from `REDUCTION_AXES`, so every per-axis stride is S1,
2*S1 or 4*S1.
"""

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Tuple

from vitgauge.errors import ConfigurationError
from vitgauge.flops import count_flops_for, stage_grids
from vitgauge.network import VitNetwork
from vitgauge.topology import STAGE_STRIDES, TopologyError

logger = logging.getLogger(__name__)

BASE_STRIDE = STAGE_STRIDES[0]

# token-count divisor -> (height, width) stride multiple of S1
REDUCTION_AXES: Dict[int, Tuple[int, int]] = {
    1: (1, 1),
    2: (2, 1),
    4: (2, 2),
    8: (4, 2),
    16: (4, 4),
}

_PHASE_PATTERN = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s*:\s*(\d+)\s*$")


@dataclass(frozen=True)
class TokenPhase:
    """First-projection sampling for an inclusive range of epochs.

    Attributes:
        stride: (height, width) stride in pixels.
        dilation: (height, width) kernel dilation.
        epoch_start: First epoch, 1-based.
        epoch_end: Last epoch, inclusive.
        factor: Token-count reduction factor.
    """

    stride: Tuple[int, int]
    dilation: Tuple[int, int]
    epoch_start: int
    epoch_end: int
    factor: int = 1

    @property
    def epochs(self) -> int:
        return self.epoch_end - self.epoch_start + 1

    @property
    def is_full_resolution(self) -> bool:
        return self.factor == 1

    def to_dict(self) -> dict:
        return {
            "stride": list(self.stride),
            "dilation": list(self.dilation),
            "epoch_start": self.epoch_start,
            "epoch_end": self.epoch_end,
            "factor": self.factor,
        }


@dataclass(frozen=True)
class TokenSchedule:
    """Coarse-to-fine phases ending at full resolution."""

    phases: Tuple[TokenPhase, ...]

    @property
    def total_epochs(self) -> int:
        return self.phases[-1].epoch_end if self.phases else 0

    def phase_at(self, epoch: int) -> TokenPhase:
        """Phase covering a 1-based epoch."""
        for phase in self.phases:
            if phase.epoch_start <= epoch <= phase.epoch_end:
                return phase
        raise ScheduleError(f"No phase covers epoch {epoch}")

    def validate(self, total_epochs: int) -> None:
        """Check contiguous coverage of 1..total_epochs and coarse-to-fine order.

        Raises:
            ScheduleError: On a gap, an overlap, a stride increase or a
                final phase that is not full resolution.
        """
        if not self.phases:
            raise ScheduleError("Schedule has no phases")
        expected = 1
        for phase in self.phases:
            if phase.epoch_end < phase.epoch_start:
                raise ScheduleError(f"Phase {phase.epoch_start}-{phase.epoch_end} ends before it starts")
            if phase.epoch_start < expected:
                raise ScheduleError(f"Phase starting at epoch {phase.epoch_start} overlaps the previous phase")
            if phase.epoch_start > expected:
                raise ScheduleError(f"Epochs {expected}-{phase.epoch_start - 1} are not covered")
            expected = phase.epoch_end + 1
        if expected - 1 != total_epochs:
            raise ScheduleError(f"Schedule covers epochs 1-{expected - 1}, expected 1-{total_epochs}")
        for before, after in zip(self.phases, self.phases[1:]):
            if after.factor > before.factor:
                raise ScheduleError("Phase strides must not increase over training")
        if not self.phases[-1].is_full_resolution:
            raise ScheduleError("The last phase must be full resolution")

    def to_document(self) -> List[dict]:
        return [phase.to_dict() for phase in self.phases]

    def digest(self) -> str:
        text = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def dilation_for_stride(stride: int, kernel: int, base_stride: int = BASE_STRIDE) -> int:
    """Dilation that keeps the kernel's receptive field at a larger stride.

    round((stride / S1 - 1) * K1 / (K1 - 1)) + 1, rounding half away from zero.

    Raises:
        ScheduleError: If K1 is 1 or the stride is not a positive multiple of S1.
    """
    if kernel <= 1:
        raise ScheduleError(f"Kernel size {kernel} cannot be dilated")
    if stride <= 0 or stride % base_stride:
        raise ScheduleError(f"Stride {stride} is not a positive multiple of {base_stride}")
    value = (Fraction(stride, base_stride) - 1) * Fraction(kernel, kernel - 1)
    return math.floor(value + Fraction(1, 2)) + 1


def phase_for_reduction(
    factor: int,
    kernel: int,
    epoch_start: int = 1,
    epoch_end: int = 1,
    base_stride: int = BASE_STRIDE,
) -> TokenPhase:
    """Build the phase for a token-count reduction factor.

    Raises:
        ScheduleError: If the factor is not one of `REDUCTION_AXES`.
    """
    if factor not in REDUCTION_AXES:
        raise ScheduleError(f"Reduction factor {factor} is not one of {sorted(REDUCTION_AXES)}")
    stride = tuple(m * base_stride for m in REDUCTION_AXES[factor])
    dilation = tuple(dilation_for_stride(s, kernel, base_stride) for s in stride)
    return TokenPhase(stride, dilation, epoch_start, epoch_end, factor)


def parse_phases(text: str, kernel: int) -> TokenSchedule:
    """Parse "1-40:4,41-70:2,71-300:1" into a schedule for kernel K1.

    Raises:
        ScheduleError: On malformed entries or unknown factors.
    """
    phases = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        match = _PHASE_PATTERN.match(part)
        if not match:
            raise ScheduleError(f"Malformed phase '{part}', expected START-END:FACTOR")
        start, end, factor = (int(g) for g in match.groups())
        phases.append(phase_for_reduction(factor, kernel, start, end))
    if not phases:
        raise ScheduleError("Schedule has no phases")
    return TokenSchedule(tuple(phases))


def flops_ratio(net: VitNetwork, reduction_factor: int) -> float:
    """FLOPs of a re-tokenized forward pass relative to full resolution."""
    phase = phase_for_reduction(reduction_factor, net.topology.kernels[0])
    full = count_flops_for(net.topology, net.scale, net.input_res)
    reduced = count_flops_for(net.topology, net.scale, net.input_res, phase.stride, phase.dilation)
    return reduced / full


def schedule_savings(schedule: TokenSchedule, total_epochs: int, net: VitNetwork) -> float:
    """Percentage of full-resolution training FLOPs a schedule saves.

    Raises:
        ScheduleError: If the schedule does not cover 1..total_epochs exactly.
    """
    schedule.validate(total_epochs)
    spent = sum(phase.epochs * flops_ratio(net, phase.factor) for phase in schedule.phases)
    return 100.0 * (1.0 - spent / total_epochs)


def savings_report(schedule: TokenSchedule, total_epochs: int, net: VitNetwork) -> dict:
    """Row for the savings CSV: schedule digest, saving and per-phase ratios."""
    ratios = [flops_ratio(net, phase.factor) for phase in schedule.phases]
    return {
        "schedule_hash": schedule.digest(),
        "saving_pct": schedule_savings(schedule, total_epochs, net),
        "phase_ratios": ";".join(f"{r:.4f}" for r in ratios),
    }


def apply_phase(net: VitNetwork, phase: TokenPhase) -> VitNetwork:
    """View of `net` whose first projection samples with the phase's stride.

    Raises:
        ScheduleError: If the phase does not match K1 or the dilated kernel
            does not fit the padded input.
    """
    kernel = net.topology.kernels[0]
    expected = tuple(dilation_for_stride(s, kernel) for s in phase.stride)
    if tuple(phase.dilation) != expected:
        raise ScheduleError(f"Dilation {phase.dilation} does not match stride {phase.stride} for K1={kernel}")
    try:
        stage_grids(net.topology, net.input_res, phase.stride, phase.dilation)
    except TopologyError as e:
        raise ScheduleError(str(e)) from e
    logger.debug("Applying stride %s dilation %s", phase.stride, phase.dilation)
    return net.retokenized(phase.stride, phase.dilation)


class ScheduleError(ConfigurationError):
    """Raised for an illegal phase or a schedule with gaps or overlaps."""
