"""Scores that compare a trained model against the exact chain quantities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .chain_oracle import build_transition, pmi_table, reach_full
from .gridworld import GridSpec
from .model import EncoderParams, Similarity
from .reach_metric import embed_all


@dataclass(frozen=True)
class RankFidelity:
    """Per-row Spearman correlation between learned scores and oracle PMI."""

    rows: np.ndarray  # preceding states that had enough reachable targets
    rho: np.ndarray

    def fraction_at_least(self, threshold: float) -> float:
        # NaN rows compare False, so they count against the fraction
        return float(np.mean(self.rho >= threshold)) if len(self.rho) else float("nan")

    @property
    def mean(self) -> float:
        """Mean correlation, scoring undefined (constant-row) correlations as 0."""
        return float(np.nan_to_num(self.rho, nan=0.0).mean()) if len(self.rho) else float("nan")


def row_spearman(scores: np.ndarray, pmi: np.ndarray, min_targets: int = 20) -> RankFidelity:
    """Correlate each row of ``scores`` with the finite entries of the same
    row of ``pmi``; rows with fewer than ``min_targets`` finite entries are
    skipped. A constant row has no defined correlation and is stored as NaN."""
    rows, rho = [], []
    for y in range(len(pmi)):
        targets = np.flatnonzero(np.isfinite(pmi[y]))
        if len(targets) < min_targets:
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            r = spearmanr(scores[y, targets], pmi[y, targets]).statistic
        rows.append(y)
        rho.append(r)
    return RankFidelity(np.array(rows, dtype=np.int64), np.array(rho, dtype=float))


def oracle_pmi(spec: GridSpec, c_steps: int, horizon: int, k_ratio: int = 1) -> np.ndarray:
    pd = reach_full(build_transition(spec), c_steps, horizon, spec.start_index)
    return pmi_table(pd, k_ratio)


def rank_fidelity(
    params: EncoderParams, sim: Similarity, spec: GridSpec, c_steps: int, horizon: int,
    k_ratio: int = 1, min_targets: int = 20,
) -> RankFidelity:
    table = embed_all(params, np.arange(spec.n_states), spec.features())
    return row_spearman(table.scores(sim), oracle_pmi(spec, c_steps, horizon, k_ratio), min_targets)


def room_separation(dist: np.ndarray, regions: np.ndarray) -> float:
    """Mean distance between cells of different rooms over the mean distance
    between distinct cells of the same room. Cells labelled -1 are ignored;
    NaN when there are fewer than two rooms or no room has two cells."""
    keep = np.flatnonzero(regions >= 0)
    d = dist[np.ix_(keep, keep)]
    lab = regions[keep]
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(keep), dtype=bool)
    if not (~same).any() or not (same & off).any():
        return float("nan")
    return float(d[~same].mean() / d[same & off].mean())
