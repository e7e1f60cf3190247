"""Rank correlation between initialization metrics and trained accuracy."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy.stats import kendalltau

from vitgauge import seeding
from vitgauge.complexity import METRICS, EvalProtocol, ProxyEvaluator
from vitgauge.dataset import ToyDataset
from vitgauge.errors import ConfigurationError, EvaluationError, VitGaugeError
from vitgauge.flops import count_flops_for, count_params_for
from vitgauge.network import build_network
from vitgauge.topology import DIMENSIONS, ScaleSpec, SearchSpace, sample_uniform, spec_hash
from vitgauge.trainer import TrainConfig, train

logger = logging.getLogger(__name__)

MIN_TOPOLOGIES = 10
DESK_SCALE = ScaleSpec(depths=(1, 1, 1, 1), width=16)

ROW_COLUMNS = ["spec_hash", *DIMENSIONS, *METRICS, "val_acc", "params", "flops", "status"]


@dataclass
class StudyResult:
    rows: pd.DataFrame
    taus: pd.DataFrame
    failures: int


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b; NaN when either input is constant.

    Raises:
        StudyError: If the inputs differ in length or have fewer than 2 items.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise StudyError(f"Length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise StudyError("Kendall tau needs at least two observations")
    tau, _ = kendalltau(x, y, variant="b")
    return float(tau)


def tau_table(rows: pd.DataFrame, target: str = "val_acc") -> pd.DataFrame:
    """Kendall tau of every metric against the target over successful rows."""
    ok = rows[rows["status"] == "ok"]
    records = []
    for metric in METRICS:
        valid = ok[[metric, target]].dropna()
        tau = kendall_tau(valid[metric], valid[target]) if len(valid) >= 2 else float("nan")
        records.append({"metric": metric, "tau": tau, "n": len(valid)})
    return pd.DataFrame(records, columns=["metric", "tau", "n"])


def correlation_study(
    space: SearchSpace,
    n_topologies: int,
    dataset: ToyDataset,
    protocol: EvalProtocol,
    train_config: Optional[TrainConfig] = None,
    scale: ScaleSpec = DESK_SCALE,
    seed: int = 0,
    jobs: int = 1,
    completed: Optional[pd.DataFrame] = None,
    on_row: Optional[Callable[[Dict], None]] = None,
) -> StudyResult:
    """Sample topologies, score them at init, train them and correlate.

    Args:
        space: Search space to sample uniformly from.
        n_topologies: Number of topologies; at least 10.
        dataset: Training data; its resolution is the network input size.
        protocol: Metric protocol used at initialization.
        train_config: Shared training recipe.
        scale: Depths and width of every sampled topology.
        seed: Seed of the "study" stream.
        jobs: Topologies trained concurrently.
        completed: Rows of an interrupted study; their topologies are skipped.
        on_row: Called with each newly finished row, in completion order.

    Raises:
        ConfigurationError: If fewer than 10 topologies are requested.
        StudyError: If every topology failed.
    """
    if n_topologies < MIN_TOPOLOGIES:
        raise ConfigurationError(f"A correlation study needs at least {MIN_TOPOLOGIES} topologies, got {n_topologies}")
    train_config = train_config or TrainConfig(seed=seed)
    evaluator = ProxyEvaluator(protocol, input_res=dataset.resolution)
    done = {} if completed is None else {row["spec_hash"]: row for row in completed.to_dict("records")}

    topologies = [sample_uniform(space, seeding.generator(seed, "study", i)) for i in range(n_topologies)]

    def run(index: int) -> Dict:
        topology = topologies[index]
        key = spec_hash(topology, scale)
        if key in done:
            logger.info("Skipping completed topology %s", key)
            return done[key]
        row = {"spec_hash": key, **topology.to_choices(),
               "params": count_params_for(topology, scale),
               "flops": count_flops_for(topology, scale, dataset.resolution)}
        try:
            report = evaluator(topology, scale)
            net = build_network(topology, scale, seed=seeding.derive_seed(seed, "init", index),
                                input_res=dataset.resolution, dtype=torch.float32)
            result = train(net, dataset, train_config)
            if result.diverged:
                raise EvaluationError("training diverged")
            row.update(report.as_dict(), val_acc=result.val_accuracy, status="ok")
        except VitGaugeError as e:
            logger.warning("Topology %s failed: %s", key, e)
            row.update({metric: float("nan") for metric in METRICS}, val_acc=float("nan"), status="failed")
        logger.info("Topology %d/%d %s val_acc=%s", index + 1, n_topologies, key, row["val_acc"])
        if on_row is not None:
            on_row(row)
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, range(n_topologies)))
    else:
        rows = [run(i) for i in range(n_topologies)]

    frame = pd.DataFrame(rows, columns=ROW_COLUMNS)
    failures = int((frame["status"] != "ok").sum())
    if failures == len(frame):
        raise StudyError(f"All {failures} topologies failed")
    if failures:
        logger.warning("%d of %d topologies failed and are excluded", failures, len(frame))
    return StudyResult(rows=frame, taus=tau_table(frame), failures=failures)


class StudyError(EvaluationError):
    """Raised when a correlation cannot be computed."""
