"""Training-free topology search with a REINFORCE policy.

The policy is an independent categorical distribution per search dimension.
Each step samples a topology, scores its length distortion L^E and NTK
condition number, and rewards the range-normalized change of both relative to
the previous step: r_t = dLE_t - dkappa_t.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import entr, softmax
from scipy.stats import rankdata

from vitgauge import seeding
from vitgauge.errors import EvaluationError, VitGaugeError
from vitgauge.topology import (
    SEED_TOPOLOGY,
    ScaleSpec,
    SearchSpace,
    TopologySpec,
    spec_hash,
)

logger = logging.getLogger(__name__)

LEARNING_RATE = 1.0
BASELINE_DECAY = 0.9
RANGE_EPSILON = 1e-8

Evaluator = Callable[[TopologySpec], Tuple[float, float]]


@dataclass
class Policy:
    """Per-dimension logits over the choices of a search space."""

    choices: Dict[str, Tuple[int, ...]]
    logits: Dict[str, np.ndarray]
    t: int = 0
    baseline: float = 0.0

    @classmethod
    def uniform(cls, space: SearchSpace) -> "Policy":
        return cls(
            choices={name: tuple(space.choices[name]) for name in space.dimensions},
            logits={name: np.zeros(len(space.choices[name])) for name in space.dimensions},
        )

    def probabilities(self, name: str) -> np.ndarray:
        return softmax(self.logits[name])

    def sample(self, rng: np.random.Generator) -> Dict[str, int]:
        """Draw one choice index per dimension."""
        return {name: int(rng.choice(len(options), p=self.probabilities(name)))
                for name, options in self.choices.items()}

    def topology(self, indices: Dict[str, int]) -> TopologySpec:
        values = SEED_TOPOLOGY.to_choices()
        values.update({name: self.choices[name][i] for name, i in indices.items()})
        return TopologySpec.from_choices(values)

    def argmax(self) -> TopologySpec:
        """Topology of highest probability (per-dimension mode)."""
        return self.topology({name: int(np.argmax(self.logits[name])) for name in self.choices})

    def copy(self) -> "Policy":
        return Policy(
            choices=dict(self.choices),
            logits={name: values.copy() for name, values in self.logits.items()},
            t=self.t,
            baseline=self.baseline,
        )

    def to_document(self) -> dict:
        return {
            "t": self.t,
            "baseline": self.baseline,
            "choices": {name: list(options) for name, options in self.choices.items()},
            "logits": {name: values.tolist() for name, values in self.logits.items()},
        }

    @classmethod
    def from_document(cls, document: dict) -> "Policy":
        try:
            return cls(
                choices={name: tuple(int(v) for v in options) for name, options in document["choices"].items()},
                logits={name: np.asarray(values, dtype=float) for name, values in document["logits"].items()},
                t=int(document["t"]),
                baseline=float(document["baseline"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SearchError(f"Malformed policy checkpoint: {e}") from e


@dataclass
class RewardHistory:
    """Raw metric sequences of successfully evaluated steps."""

    LE: List[float] = field(default_factory=list)
    kappa_theta: List[float] = field(default_factory=list)

    def append(self, le: float, kappa_theta: float) -> None:
        self.LE.append(float(le))
        self.kappa_theta.append(float(kappa_theta))

    def __len__(self) -> int:
        return len(self.LE)


@dataclass
class SearchResult:
    best: TopologySpec
    trajectory: pd.DataFrame
    policy: Policy
    history: RewardHistory


def policy_entropy(policy: Policy) -> float:
    """Sum of per-dimension categorical entropies, in nats."""
    return float(sum(entr(policy.probabilities(name)).sum() for name in policy.choices))


def normalize_reward(history: RewardHistory, t: int) -> Tuple[float, float]:
    """Range-normalized deltas of L^E and kappa_theta at 1-based step t.

    The min/max range covers steps 1..t, the current value included. At t=1
    there is no previous value and both deltas are 0.
    """
    if t < 1 or t > len(history):
        raise SearchError(f"Step {t} is outside the reward history of length {len(history)}")
    if t == 1:
        return 0.0, 0.0
    return _normalized_delta(history.LE, t), _normalized_delta(history.kappa_theta, t)


def reward(history: RewardHistory, t: int) -> float:
    le_hat, kappa_hat = normalize_reward(history, t)
    return le_hat - kappa_hat


def search_step(
    policy: Policy,
    evaluator: Evaluator,
    history: RewardHistory,
    rng: np.random.Generator,
    learning_rate: float = LEARNING_RATE,
    baseline_decay: float = BASELINE_DECAY,
) -> Tuple[Policy, TopologySpec, Optional[float]]:
    """Sample, score and apply one REINFORCE update.

    Returns:
        (updated policy, sampled topology, reward). The reward is None when
        the evaluator failed; the policy is then unchanged apart from its step
        counter and the history is not extended.
    """
    indices = policy.sample(rng)
    spec = policy.topology(indices)
    updated = policy.copy()
    updated.t += 1
    try:
        le, kappa_theta = evaluator(spec)
        if not (np.isfinite(le) and np.isfinite(kappa_theta)):
            raise SearchError(f"Non-finite metrics LE={le} kappa_theta={kappa_theta}")
    except VitGaugeError as e:
        logger.warning("Step %d: skipping %s (%s)", updated.t, spec_hash(spec), e)
        return updated, spec, None

    history.append(le, kappa_theta)
    r = reward(history, len(history))
    advantage = r - policy.baseline
    for name, index in indices.items():
        grad = -policy.probabilities(name)
        grad[index] += 1.0
        updated.logits[name] = policy.logits[name] + learning_rate * advantage * grad
    updated.baseline = baseline_decay * policy.baseline + (1 - baseline_decay) * r
    return updated, spec, r


def run_search(
    space: SearchSpace,
    evaluator: Evaluator,
    steps: int = 500,
    seed: int = 0,
    learning_rate: float = LEARNING_RATE,
    baseline_decay: float = BASELINE_DECAY,
    policy: Optional[Policy] = None,
    history: Optional[RewardHistory] = None,
    log_every: int = 50,
) -> SearchResult:
    """Run the search loop and return the most probable topology.

    Args:
        space: Search space.
        evaluator: Maps a topology to (L^E, kappa_theta).
        steps: Number of policy updates T.
        seed: Global seed; step t samples from the "policy" stream at index t,
            so a resumed run continues the same trajectory.
        learning_rate: Logit step size.
        baseline_decay: Decay of the reward moving average.
        policy: Policy to resume from; uniform when omitted.
        history: Reward history to resume from.
        log_every: Log progress every this many steps.

    Raises:
        SearchError: If steps < 1 or every step's evaluation failed.
    """
    if steps < 1:
        raise SearchError(f"steps must be >= 1, got {steps}")
    policy = policy.copy() if policy is not None else Policy.uniform(space)
    history = history if history is not None else RewardHistory()
    dims = list(policy.choices)

    rows = []
    failures = 0
    for _ in range(steps):
        rng = seeding.generator(seed, "policy", policy.t)
        policy, spec, r = search_step(policy, evaluator, history, rng, learning_rate, baseline_decay)
        choices = spec.to_choices()
        row = {"t": policy.t, "spec_hash": spec_hash(spec), **{d: choices[d] for d in dims}}
        if r is None:
            failures += 1
            row.update(LE=np.nan, kappa_theta=np.nan, reward=np.nan, status="failed")
        else:
            row.update(LE=history.LE[-1], kappa_theta=history.kappa_theta[-1], reward=r, status="ok")
        row["entropy"] = policy_entropy(policy)
        rows.append(row)
        if log_every and policy.t % log_every == 0:
            logger.info("step %d entropy=%.3f reward=%s", policy.t, row["entropy"], row["reward"])

    if failures == steps:
        raise SearchError(f"All {steps} search steps failed to evaluate")
    columns = ["t", "spec_hash", *dims, "LE", "kappa_theta", "reward", "entropy", "status"]
    trajectory = pd.DataFrame(rows, columns=columns)
    return SearchResult(best=policy.argmax(), trajectory=trajectory, policy=policy, history=history)


def rescore_top(trajectory: pd.DataFrame, evaluator: Evaluator, k: int = 5) -> pd.DataFrame:
    """Re-score the k best distinct sampled topologies with a fuller protocol.

    Candidates are ranked by the sum of their L^E rank (descending) and
    kappa_theta rank (ascending) within the trajectory.
    """
    ok = trajectory[trajectory["status"] == "ok"].drop_duplicates("spec_hash").reset_index(drop=True)
    if ok.empty:
        return pd.DataFrame(columns=["spec_hash", "LE", "kappa_theta", "rank_sum"])
    ok["rank_sum"] = rankdata(-ok["LE"].to_numpy()) + rankdata(ok["kappa_theta"].to_numpy())
    top = ok.sort_values(["rank_sum", "t"]).head(k)
    dims = [c for c in trajectory.columns if c not in
            ("t", "spec_hash", "LE", "kappa_theta", "reward", "entropy", "status")]

    rows = []
    for _, row in top.iterrows():
        values = SEED_TOPOLOGY.to_choices()
        values.update({d: int(row[d]) for d in dims})
        spec = TopologySpec.from_choices(values)
        le, kappa_theta = evaluator(spec)
        rows.append({"spec_hash": row["spec_hash"], **{d: int(row[d]) for d in dims},
                     "LE": le, "kappa_theta": kappa_theta, "rank_sum": row["rank_sum"]})
    return pd.DataFrame(rows)


def metric_evaluator(proxy, scale: ScaleSpec) -> Evaluator:
    """Adapt a report-producing evaluator to the (L^E, kappa_theta) interface."""

    def evaluate(spec: TopologySpec) -> Tuple[float, float]:
        report = proxy(spec, scale)
        return report.LE, report.kappa_theta

    return evaluate


def checkpoint_document(policy: Policy, history: RewardHistory) -> dict:
    return {"policy": policy.to_document(),
            "history": {"LE": list(history.LE), "kappa_theta": list(history.kappa_theta)}}


def load_checkpoint(path: Path) -> Tuple[Policy, RewardHistory]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        history = RewardHistory(LE=list(document["history"]["LE"]),
                                kappa_theta=list(document["history"]["kappa_theta"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise SearchError(f"Cannot load policy checkpoint {path}: {e}") from e
    return Policy.from_document(document["policy"]), history


def _normalized_delta(values: List[float], t: int) -> float:
    seen = values[:t]
    spread = max(max(seen) - min(seen), RANGE_EPSILON)
    return (values[t - 1] - values[t - 2]) / spread


class SearchError(EvaluationError):
    """Raised when the search cannot make progress."""
