"""Adam on the negated NCE objective, one fresh batch per step."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gridworld import TrajectoryDataset
from .model import COSINE, EncoderParams, Similarity, init_params, loss_and_grad, save_checkpoint
from .pair_sampler import PairSampler, SamplerConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 50_000
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    log_every: int = 100
    seed: int = 0
    average_tail: int = 0  # if > 0, return the mean of the last this-many iterates

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.average_tail <= self.steps:
            raise ValueError("average_tail must lie in [0, steps]")


@dataclass
class TrainLog:
    step: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    pos_acc: list[float] = field(default_factory=list)
    neg_acc: list[float] = field(default_factory=list)

    def append(self, step: int, report) -> None:
        if self.step and step <= self.step[-1]:
            raise ValueError("log steps must increase")
        self.step.append(step)
        self.objective.append(report.objective)
        self.pos_acc.append(report.positive_accuracy)
        self.neg_acc.append(report.negative_accuracy)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "objective", "pos_acc", "neg_acc"])
            for row in zip(self.step, self.objective, self.pos_acc, self.neg_acc):
                w.writerow([row[0], *(repr(v) for v in row[1:])])


class Adam:
    def __init__(self, params: EncoderParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros_like(params.buffer)
        self.v = np.zeros_like(params.buffer)
        self.t = 0

    def update(self, params: EncoderParams, grads: EncoderParams) -> None:
        cfg = self.cfg
        g = grads.buffer
        self.t += 1
        self.m *= cfg.adam_beta1
        self.m += (1.0 - cfg.adam_beta1) * g
        self.v *= cfg.adam_beta2
        self.v += (1.0 - cfg.adam_beta2) * (g * g)
        c1 = 1.0 - cfg.adam_beta1**self.t
        c2 = 1.0 - cfg.adam_beta2**self.t
        params.buffer -= cfg.learning_rate * (self.m / c1) / (np.sqrt(self.v / c2) + cfg.adam_eps)


def train(
    dataset: TrajectoryDataset,
    sampler_cfg: SamplerConfig,
    model_init: EncoderParams | None,
    train_cfg: TrainConfig,
    sim: Similarity = COSINE,
    checkpoint_path: str | Path | None = None,
) -> tuple[EncoderParams, TrainLog]:
    """Maximize the NCE objective; ``model_init`` is copied, never mutated.

    With ``average_tail`` set, the returned parameters are the running mean
    of the final iterates, which removes most of Adam's constant-step jitter
    around an optimum.
    """
    params = (model_init or init_params(seed=train_cfg.seed)).copy()
    sampler = PairSampler(dataset, sampler_cfg)
    opt = Adam(params, train_cfg)
    history = TrainLog()
    features = dataset.features
    tail_start = train_cfg.steps - train_cfg.average_tail
    tail_sum = np.zeros_like(params.buffer) if train_cfg.average_tail else None
    for step in range(1, train_cfg.steps + 1):
        batch = sampler.batch(train_cfg.batch_size)
        report, grads = loss_and_grad(params, sim, batch, sampler_cfg.k_ratio, features)
        if not np.isfinite(report.objective):
            raise TrainingDiverged(f"non-finite objective {report.objective} at step {step}")
        opt.update(params, grads)
        if not params.is_finite():
            raise TrainingDiverged(f"non-finite parameters after step {step}")
        if tail_sum is not None and step > tail_start:
            tail_sum += params.buffer
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            history.append(step, report)
        if checkpoint_path and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(params, checkpoint_path, step=step)
            log.info("step %d objective %.5f", step, report.objective)
    if tail_sum is not None:
        params.buffer[:] = tail_sum / train_cfg.average_tail
    return params, history
