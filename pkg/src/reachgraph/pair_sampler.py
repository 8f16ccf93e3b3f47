"""Streaming positive/negative pair sampling for binary NCE.

Positive pairs are drawn uniformly over every valid (episode, t, j) index
triple, which reproduces the count-based joint distribution of (Y, X)
without ever materializing the O(N T C) pair list.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .chain_oracle import n_pairs
from .gridworld import TrajectoryDataset


class NegativeMode(str, enum.Enum):
    MARGINAL_X = "marginal_x"
    MARGINAL_Y = "marginal_y"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class SamplerConfig:
    c_steps: int = 16
    k_ratio: int = 1
    negative_mode: NegativeMode = NegativeMode.MARGINAL_X
    rng_seed: int = 0
    symmetric: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "negative_mode", NegativeMode(self.negative_mode))
        if self.c_steps < 1:
            raise ValueError("C must be >= 1")
        if self.k_ratio < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True)
class TrainingBatch:
    """Index arrays; negatives reuse each positive's y exactly K times."""

    y_pos: np.ndarray
    x_pos: np.ndarray
    y_neg: np.ndarray
    x_neg: np.ndarray

    @property
    def size(self) -> int:
        return len(self.y_pos)

    def repeated(self, times: int) -> TrainingBatch:
        return TrainingBatch(*(np.tile(a, times) for a in (self.y_pos, self.x_pos, self.y_neg, self.x_neg)))


class PairSampler:
    def __init__(self, dataset: TrajectoryDataset, cfg: SamplerConfig):
        if dataset.n_episodes < 1:
            raise ValueError("empty dataset")
        if cfg.c_steps > dataset.horizon:
            raise ValueError(f"C={cfg.c_steps} exceeds dataset horizon T={dataset.horizon}")
        self.dataset = dataset
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)
        horizon, c = dataset.horizon, cfg.c_steps
        self._head = (horizon - c + 1) * c
        self._total = n_pairs(horizon, c)
        # tail starts t = T-C+1 .. T-1 hold C-1, ..., 1 pairs
        tail_sizes = np.arange(c - 1, 0, -1)
        self._tail_offsets = np.concatenate([[0], np.cumsum(tail_sizes)])
        self._visited = dataset.visited()

    def sample_positive(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (y, x) index arrays of ``count`` pairs drawn with replacement."""
        if count < 1:
            raise ValueError("count must be >= 1")
        data, c, horizon = self.dataset.states, self.cfg.c_steps, self.dataset.horizon
        ep = self.rng.integers(0, data.shape[0], size=count)
        u = self.rng.integers(0, self._total, size=count)
        t = np.empty(count, dtype=np.int64)
        lag = np.empty(count, dtype=np.int64)
        head = u < self._head
        t[head] = u[head] // c
        lag[head] = u[head] % c + 1
        rest = u[~head] - self._head
        slot = np.searchsorted(self._tail_offsets, rest, side="right") - 1
        t[~head] = horizon - c + 1 + slot
        lag[~head] = rest - self._tail_offsets[slot] + 1
        j = t + lag
        if self.cfg.symmetric:
            flip = self.rng.random(count) < 0.5
            t, j = np.where(flip, j, t), np.where(flip, t, j)
        return data[ep, t], data[ep, j]

    def sample_negative(self, y_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """K negatives per y, drawn from the configured noise distribution."""
        k = self.cfg.k_ratio
        y = np.repeat(np.asarray(y_batch, dtype=np.int64), k)
        mode = self.cfg.negative_mode
        if mode is NegativeMode.UNIFORM:
            x = self._visited[self.rng.integers(0, len(self._visited), size=len(y))]
        else:
            ys, xs = self.sample_positive(len(y))
            x = xs if mode is NegativeMode.MARGINAL_X else ys
        return y, x

    def batch(self, size: int) -> TrainingBatch:
        y, x = self.sample_positive(size)
        yn, xn = self.sample_negative(y)
        return TrainingBatch(y, x, yn, xn)


def window_pairs(length: int, c_steps: int, symmetric: bool = False) -> list[tuple[int, int]]:
    """Enumerate the (t, j) index pairs a trajectory of ``length`` states offers.

    Directed: t < j <= min(t + C, T) with t <= T - 1. Symmetric: every
    j != i with |i - j| <= C.
    """
    horizon = length - 1
    if symmetric:
        return [
            (i, j)
            for i in range(horizon + 1)
            for j in range(max(i - c_steps, 0), min(i + c_steps, horizon) + 1)
            if j != i
        ]
    return [(t, j) for t in range(horizon) for j in range(t + 1, min(t + c_steps, horizon) + 1)]
