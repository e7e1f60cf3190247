"""Desk-scale supervised training of a network plus linear head.

Training uses AdamW with a cosine learning-rate decay over all steps. An
optional token schedule swaps the first projection's sampling per epoch
through parameter-sharing views, so optimizer state carries across phases.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR

from vitgauge import seeding
from vitgauge.dataset import ToyDataset
from vitgauge.network import VitNetwork, count_flops, init_weights, materialize
from vitgauge.retokenize import TokenSchedule, apply_phase, parse_phases

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training recipe shared by every topology of a study.

    Attributes:
        epochs: Passes over the training split.
        batch_size: Samples per optimizer step.
        learning_rate: Peak AdamW learning rate.
        weight_decay: AdamW decoupled weight decay.
        phases: Optional token schedule, e.g. "1-4:4,5-7:2,8-10:1".
        seed: Seed of the "train" stream (head init, batch order).
    """

    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    phases: str = ""
    seed: int = 0


@dataclass
class TrainResult:
    val_accuracy: float
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)
    flops: List[int] = field(default_factory=list)
    wall_seconds: float = 0.0
    diverged: bool = False

    def to_frame(self) -> pd.DataFrame:
        """Per-epoch curves: epoch, loss, val_accuracy, flops (MACs per image)."""
        return pd.DataFrame({
            "epoch": np.arange(1, len(self.losses) + 1),
            "loss": self.losses,
            "val_accuracy": self.accuracies,
            "flops": self.flops,
        })


class ToyClassifier(nn.Module):
    """LayerNorm + linear head over pooled backbone features."""

    def __init__(self, features: int, classes: int):
        super().__init__()
        self.norm = nn.LayerNorm(features)
        self.fc = nn.Linear(features, classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(x))


def train(net: VitNetwork, dataset: ToyDataset, config: TrainConfig) -> TrainResult:
    """Train `net` in place with a fresh head.

    A non-finite loss stops training and is reported through
    `TrainResult.diverged`; the remaining epochs are filled with NaN.

    Raises:
        ScheduleError: If `config.phases` does not cover 1..epochs.
    """
    schedule = _schedule(net, config)
    dtype = next(net.parameters()).dtype
    head = _make_head(net.output_dim, dataset.classes, dtype, config.seed)
    train_x, train_y = dataset.train()
    val_x, val_y = dataset.val()
    train_x = train_x.to(dtype)

    steps_per_epoch = max(1, -(-len(train_y) // config.batch_size))
    params = list(net.parameters()) + list(head.parameters())
    optimizer = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    scheduler = CosineAnnealingLR(optimizer, T_max=max(1, config.epochs * steps_per_epoch))

    result = TrainResult(val_accuracy=float("nan"))
    started = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        view = apply_phase(net, schedule.phase_at(epoch)) if schedule else net
        net.train()
        head.train()
        order = seeding.generator(config.seed, "train", epoch).permutation(len(train_y))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = torch.from_numpy(order[start:start + config.batch_size])
            loss = F.cross_entropy(head(view(train_x[batch])), train_y[batch])
            if not torch.isfinite(loss):
                logger.warning("Loss diverged at epoch %d", epoch)
                result.diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        if result.diverged:
            break

        result.losses.append(total / max(seen, 1))
        result.accuracies.append(evaluate_accuracy(net, head, val_x, val_y, config.batch_size))
        result.flops.append(count_flops(view))
        logger.info("epoch %d loss=%.4f val_acc=%.3f", epoch, result.losses[-1], result.accuracies[-1])

    missing = config.epochs - len(result.losses)
    result.losses.extend([float("nan")] * missing)
    result.accuracies.extend([float("nan")] * missing)
    result.flops.extend([0] * missing)
    result.val_accuracy = evaluate_accuracy(net, head, val_x, val_y, config.batch_size)
    result.wall_seconds = time.perf_counter() - started
    return result


def evaluate_accuracy(
    net: nn.Module,
    head: nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy; NaN for an empty split."""
    if len(labels) == 0:
        return float("nan")
    dtype = next(net.parameters()).dtype
    net.eval()
    head.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            logits = head(net(images[start:start + batch_size].to(dtype)))
            correct += int((logits.argmax(dim=1) == labels[start:start + batch_size]).sum())
    return correct / len(labels)


def _make_head(features: int, classes: int, dtype: torch.dtype, seed: int) -> ToyClassifier:
    head = materialize(lambda: ToyClassifier(features, classes), dtype)
    return init_weights(head, seeding.derive_seed(seed, "train"))


def _schedule(net: VitNetwork, config: TrainConfig) -> Optional[TokenSchedule]:
    if not config.phases:
        return None
    schedule = parse_phases(config.phases, net.topology.kernels[0])
    schedule.validate(config.epochs)
    return schedule
