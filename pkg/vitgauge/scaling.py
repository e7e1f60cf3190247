"""Greedy training-free scaling of depth and width.

Starting from a small seed architecture, every step tries the 16 combinations
of a width ratio and a one-stage depth increment, ranks them by L^E
(descending) and kappa_theta (ascending), and keeps the one with the smallest
rank sum until the parameter budget is reached.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from vitgauge import seeding
from vitgauge.errors import ConfigurationError, EvaluationError
from vitgauge.flops import count_params_for
from vitgauge.topology import NUM_STAGES, ScaleSpec, TopologySpec

logger = logging.getLogger(__name__)

WIDTH_RATIOS = (1.05, 1.10, 1.15, 1.20)

ScaleEvaluator = Callable[[TopologySpec, ScaleSpec], Tuple[float, float]]


@dataclass(frozen=True)
class ScalingChoice:
    """Width ratio plus one extra block in a single stage (0-based index)."""

    width_ratio: float
    stage: int

    @property
    def depth_delta(self) -> Tuple[int, int, int, int]:
        return tuple(1 if i == self.stage else 0 for i in range(NUM_STAGES))

    def __str__(self) -> str:
        return f"x{self.width_ratio:.2f}@stage{self.stage + 1}"


@dataclass
class ScalingStep:
    step: int
    scale: ScaleSpec
    params: int
    LE: float
    kappa_theta: float
    choice: Optional[ScalingChoice] = None


@dataclass
class ScalingTrajectory:
    """Every architecture visited by one scaling run, seed first."""

    topology: TopologySpec
    steps: List[ScalingStep] = field(default_factory=list)

    @property
    def final(self) -> ScalingStep:
        return self.steps[-1]

    def architectures(self) -> Iterator[Tuple[int, TopologySpec, ScaleSpec]]:
        for entry in self.steps:
            yield entry.step, self.topology, entry.scale

    def to_frame(self) -> pd.DataFrame:
        """One row per step: step, L1..L4, C, params, ratio, stage, LE, kappa_theta."""
        rows = []
        for entry in self.steps:
            row = {"step": entry.step, **entry.scale.to_dict(), "params": entry.params}
            row["ratio"] = entry.choice.width_ratio if entry.choice else np.nan
            row["stage"] = entry.choice.stage + 1 if entry.choice else np.nan
            row.update(LE=entry.LE, kappa_theta=entry.kappa_theta)
            rows.append(row)
        columns = ["step", "L1", "L2", "L3", "L4", "C", "params", "ratio", "stage", "LE", "kappa_theta"]
        return pd.DataFrame(rows, columns=columns)


def enumerate_choices() -> List[ScalingChoice]:
    """All 16 (ratio, stage) choices, ratio-major."""
    return [ScalingChoice(ratio, stage) for ratio in WIDTH_RATIOS for stage in range(NUM_STAGES)]


def apply_choice(scale: ScaleSpec, choice: ScalingChoice, multiple: int = 1) -> ScaleSpec:
    """Grow a scale by one choice.

    The width is rounded half-up, grows by at least one channel, and is then
    rounded up to a multiple of `multiple` (the stage-1 head count).
    """
    exact = scale.width * Fraction(str(choice.width_ratio))
    width = max(math.floor(exact + Fraction(1, 2)), scale.width + 1)
    width = -(-width // multiple) * multiple
    depths = tuple(d + delta for d, delta in zip(scale.depths, choice.depth_delta))
    return ScaleSpec(depths=depths, width=width)


def rank_candidates(candidates: Sequence[Tuple[ScalingChoice, float, float]]) -> pd.DataFrame:
    """Rank table sorted best-first.

    Ties in a metric share their average rank. Equal rank sums fall back to
    the better L^E rank, then the earlier stage, then the smaller ratio.

    Raises:
        ScalingError: If there are no candidates or a metric is not finite.
    """
    if not candidates:
        raise ScalingError("No scaling candidates to rank")
    frame = pd.DataFrame(
        [{"choice": c, "ratio": c.width_ratio, "stage": c.stage, "LE": le, "kappa_theta": k}
         for c, le, k in candidates]
    )
    if not np.all(np.isfinite(frame[["LE", "kappa_theta"]].to_numpy(dtype=float))):
        raise ScalingError("Scaling candidates must have finite L^E and kappa_theta")
    frame["LE_rank"] = rankdata(-frame["LE"].to_numpy(dtype=float))
    frame["kappa_rank"] = rankdata(frame["kappa_theta"].to_numpy(dtype=float))
    frame["rank_sum"] = frame["LE_rank"] + frame["kappa_rank"]
    return frame.sort_values(["rank_sum", "LE_rank", "stage", "ratio"], kind="mergesort").reset_index(drop=True)


def rank_and_select(candidates: Sequence[Tuple[ScalingChoice, float, float]]) -> ScalingChoice:
    """Choice with the minimal rank sum."""
    return rank_candidates(candidates).loc[0, "choice"]


def run_autoscale(
    topology: TopologySpec,
    seed_scale: ScaleSpec,
    budget: int,
    evaluator: ScaleEvaluator,
    jobs: int = 1,
    random_scaling: bool = False,
    seed: int = 0,
) -> ScalingTrajectory:
    """Grow the seed architecture until its parameter count reaches `budget`.

    Args:
        topology: Fixed topology being scaled.
        seed_scale: Starting depths and width.
        budget: Parameter count at which scaling stops.
        evaluator: Maps (topology, scale) to (L^E, kappa_theta).
        jobs: Worker threads for the 16 candidate evaluations of a step.
        random_scaling: Pick a uniformly random choice per step instead of
            ranking; only the chosen candidate is evaluated.
        seed: Seed of the "scaling" stream used by random scaling.

    Returns:
        Trajectory whose first entry is the seed architecture.

    Raises:
        ScalingError: If the budget does not exceed the seed's parameters.
        EvaluationError: If every candidate of a step fails to evaluate.
    """
    multiple = topology.stage_heads[0]
    params = count_params_for(topology, seed_scale)
    if budget <= params:
        raise ScalingError(f"Budget {budget} must exceed the seed architecture's {params} parameters")

    le, kappa_theta = evaluator(topology, seed_scale)
    trajectory = ScalingTrajectory(topology, [ScalingStep(0, seed_scale, params, le, kappa_theta)])
    current = seed_scale
    step = 0
    while params < budget:
        step += 1
        if random_scaling:
            choices = enumerate_choices()
            rng = seeding.generator(seed, "scaling", step)
            choice = choices[int(rng.integers(len(choices)))]
            current = apply_choice(current, choice, multiple)
            le, kappa_theta = evaluator(topology, current)
        else:
            choice, current, le, kappa_theta = _greedy_step(topology, current, evaluator, multiple, jobs)
        params = count_params_for(topology, current)
        trajectory.steps.append(ScalingStep(step, current, params, le, kappa_theta, choice))
        logger.info("scaling step %d: %s -> L=%s C=%d params=%d", step, choice, current.depths, current.width, params)
    return trajectory


def select_nearest(trajectory: ScalingTrajectory, targets: Sequence[float]) -> pd.DataFrame:
    """For each parameter target, the visited architecture closest to it.

    Equal distances resolve to the earlier step.
    """
    frame = trajectory.to_frame()
    rows = []
    for target in targets:
        distance = (frame["params"] - target).abs()
        picked = frame.loc[distance.idxmin()].to_dict()
        rows.append({"target": target, **picked})
    return pd.DataFrame(rows)


def trend_agreement(trajectory: ScalingTrajectory) -> float:
    """Fraction of steps where L^E did not drop and kappa_theta did not rise."""
    le = np.array([s.LE for s in trajectory.steps])
    kappa = np.array([s.kappa_theta for s in trajectory.steps])
    if len(le) < 2:
        return float("nan")
    agree = (np.diff(le) >= 0) & (np.diff(kappa) <= 0)
    return float(agree.mean())


def _greedy_step(
    topology: TopologySpec,
    current: ScaleSpec,
    evaluator: ScaleEvaluator,
    multiple: int,
    jobs: int,
) -> Tuple[ScalingChoice, ScaleSpec, float, float]:
    grown = [(choice, apply_choice(current, choice, multiple)) for choice in enumerate_choices()]

    def score(item):
        choice, scale = item
        try:
            return evaluator(topology, scale)
        except EvaluationError as e:
            logger.warning("Dropping candidate %s: %s", choice, e)
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(score, grown))
    else:
        scores = [score(item) for item in grown]

    candidates = [(choice, *metrics) for (choice, _), metrics in zip(grown, scores) if metrics is not None]
    if not candidates:
        raise EvaluationError("Every scaling candidate failed to evaluate")
    for choice, le, kappa_theta in candidates:
        logger.debug("candidate %s LE=%.4g kappa_theta=%.4g", choice, le, kappa_theta)
    best = rank_and_select(candidates)
    index = next(i for i, (choice, _) in enumerate(grown) if choice == best)
    le, kappa_theta = scores[index]
    return best, grown[index][1], le, kappa_theta


class ScalingError(ConfigurationError):
    """Raised for an invalid scaling budget or candidate set."""
