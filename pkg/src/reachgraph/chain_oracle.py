"""Exact transition-matrix computations for the uniform-policy chain.

Everything here is dense float64 linear algebra; state spaces are small
enough that O(n^3 C) is negligible.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridworld import Action, GridSpec, successor_table


@dataclass(frozen=True)
class TransitionMatrix:
    p: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(p < 0) or np.any(p > 1) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition matrix must be row-stochastic")
        object.__setattr__(self, "p", p)

    @property
    def n_states(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class ReachabilityTable:
    r: np.ndarray
    c_steps: int
    mode: str  # "approximate" | "full_counting"


@dataclass(frozen=True)
class PairDistributions:
    """Expected distribution of ordered (y, x) pairs, ``joint`` indexed [y, x]."""

    joint: np.ndarray
    marginal_y: np.ndarray
    marginal_x: np.ndarray
    horizon: int
    c_steps: int
    init: int

    def conditional(self) -> np.ndarray:
        """P(x | y); rows of never-preceding states are left as NaN."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.joint / self.marginal_y[:, None]

    def as_table(self) -> ReachabilityTable:
        return ReachabilityTable(self.conditional(), self.c_steps, "full_counting")


def build_transition(spec: GridSpec) -> TransitionMatrix:
    succ = successor_table(spec)
    n = spec.n_states
    p = np.zeros((n, n))
    for a in range(len(Action)):
        np.add.at(p, (np.arange(n), succ[:, a]), 1.0)
    return TransitionMatrix(p / len(Action))


def matrix_powers(p: np.ndarray, upto: int) -> list[np.ndarray]:
    """[P^1, ..., P^upto] by repeated multiplication."""
    out = [p]
    for _ in range(upto - 1):
        out.append(out[-1] @ p)
    return out


def reach_approx(tm: TransitionMatrix | np.ndarray, c_steps: int) -> ReachabilityTable:
    """Average of the first C matrix powers, (1/C) sum_{t=1..C} P^t."""
    if c_steps < 1:
        raise ValueError("C must be >= 1")
    p = tm.p if isinstance(tm, TransitionMatrix) else np.asarray(tm, dtype=float)
    acc = np.zeros_like(p)
    pt = np.eye(p.shape[0])
    for _ in range(c_steps):
        pt = pt @ p
        acc += pt
    return ReachabilityTable(acc / c_steps, c_steps, "approximate")


def n_pairs(horizon: int, c_steps: int) -> int:
    """Ordered index pairs (t, j), t < j <= min(t + C, T), in one trajectory."""
    return (horizon - c_steps + 1) * c_steps + c_steps * (c_steps - 1) // 2


def reach_full(
    tm: TransitionMatrix | np.ndarray, c_steps: int, horizon: int, init: int
) -> PairDistributions:
    """Pair distribution of a T-step chain started from a point mass.

    Visit counts n(S_t = y) are replaced by their expectations (rho_0 P^t)[y],
    which makes the count-based joint deterministic. The head block
    t <= T - C contributes a full C-step window, the tail block the
    truncated windows that run into the end of the chain.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 1 <= c_steps <= horizon:
        raise ValueError(f"need 1 <= C <= T, got C={c_steps}, T={horizon}")
    p = tm.p if isinstance(tm, TransitionMatrix) else np.asarray(tm, dtype=float)
    n = p.shape[0]

    # occupancy[t] = rho_0 P^t for t = 0..T-1
    occupancy = np.empty((horizon, n))
    v = np.zeros(n)
    v[init] = 1.0
    for t in range(horizon):
        occupancy[t] = v
        v = v @ p

    powers = matrix_powers(p, c_steps)
    cumulative = np.cumsum(powers, axis=0)  # cumulative[m-1] = sum_{i=1..m} P^i

    head = occupancy[: horizon - c_steps + 1].sum(axis=0)
    joint = head[:, None] * cumulative[c_steps - 1]
    weight_y = c_steps * head
    for t in range(horizon - c_steps + 1, horizon):
        m = horizon - t
        joint += occupancy[t][:, None] * cumulative[m - 1]
        weight_y += m * occupancy[t]

    denom = n_pairs(horizon, c_steps)
    joint /= denom
    marginal_y = weight_y / denom
    marginal_x = joint.sum(axis=0)
    return PairDistributions(joint, marginal_y, marginal_x, horizon, c_steps, init)


def pmi_table(pd: PairDistributions, k_ratio: int = 1) -> np.ndarray:
    """log(joint / (P_Y P_X)) - log K, with -inf where the pair never occurs."""
    if k_ratio < 1:
        raise ValueError("K must be >= 1")
    outer = np.outer(pd.marginal_y, pd.marginal_x)
    out = np.full(pd.joint.shape, -np.inf)
    live = pd.joint > 0
    out[live] = np.log(pd.joint[live] / outer[live]) - np.log(k_ratio)
    return out


def empirical_pairs(states: np.ndarray, n_states: int, c_steps: int) -> np.ndarray:
    """Normalized counts of all (y, x) window pairs in an (N, T+1) index array."""
    states = np.atleast_2d(states)
    counts = np.zeros((n_states, n_states))
    horizon = states.shape[1] - 1
    for lag in range(1, min(c_steps, horizon) + 1):
        y = states[:, :-lag].ravel()
        x = states[:, lag:].ravel()
        counts += np.bincount(y * n_states + x, minlength=n_states * n_states).reshape(
            n_states, n_states
        )
    return counts / counts.sum()


MAT_MAGIC = "reachgraph-mat v1"


def save_matrix(
    path: str | Path, m: np.ndarray, **meta: object
) -> None:
    """Write a dense matrix as CSV under a one-line header.

    Extra keyword metadata is appended to the header as ``key=value`` tokens.
    Non-finite entries are written as ``inf``/``-inf``/``nan``.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    extra = "".join(f" {k}={v}" for k, v in meta.items())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{MAT_MAGIC} {m.shape[0]} {m.shape[1]}{extra}\n")
        np.savetxt(fh, m, fmt="%.17g", delimiter=",")


def load_matrix(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != MAT_MAGIC.split():
            raise ValueError(f"{path}: not a {MAT_MAGIC} file")
        rows, cols = int(header[2]), int(header[3])
        meta = dict(tok.split("=", 1) for tok in header[4:])
        m = np.loadtxt(fh, delimiter=",", ndmin=2) if rows else np.zeros((0, cols))
    if m.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {m.shape}")
    return m, meta
