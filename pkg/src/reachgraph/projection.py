"""Exact t-SNE on a precomputed distance matrix, and SVG emission."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PERPLEXITY_TOL = 1e-5


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum: float = 0.5
    final_momentum: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.perplexity < 2:
            raise ValueError("perplexity must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class Projection2D:
    coords: np.ndarray
    final_kl: float
    kl_after_exaggeration: float
    perplexity: float
    unmatched: tuple[int, ...] = ()  # rows whose bandwidth search hit a boundary


def _row_affinity(dist_sq: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    shifted = dist_sq - dist_sq.min()
    p = np.exp(-shifted * beta)
    total = p.sum()
    p /= total
    entropy = float(np.log(total) + beta * (shifted * p).sum())
    return p, entropy


def conditional_affinities(dist: np.ndarray, perplexity: float) -> tuple[np.ndarray, list[int]]:
    """Row-normalized Gaussian affinities, bandwidth chosen by bisection on
    the entropy so that exp(H) equals the perplexity."""
    n = len(dist)
    dist_sq = np.square(dist)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    unmatched = []
    for i in range(n):
        row = np.delete(dist_sq[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        pi, h = _row_affinity(row, beta)
        for _ in range(200):
            if abs(h - target) <= PERPLEXITY_TOL:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            pi, h = _row_affinity(row, beta)
        else:
            unmatched.append(i)
        p[i, np.arange(n) != i] = pi
    return p, unmatched


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))).sum())


def tsne(dist: np.ndarray, cfg: TsneConfig = TsneConfig()) -> Projection2D:
    """Classic exact t-SNE (early exaggeration, momentum, adaptive gains)."""
    dist = np.asarray(dist, dtype=float)
    n = len(dist)
    if n < 4:
        raise ValueError("t-SNE needs at least 4 points")
    if not np.allclose(dist, dist.T):
        raise ValueError("distance matrix must be symmetric")
    dist = np.maximum(dist, 0.0)
    perplexity = max(min(cfg.perplexity, (n - 1) / 3.0), 1.0)

    cond, unmatched = conditional_affinities(dist, perplexity)
    p = cond + cond.T
    p /= p.sum()
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(cfg.seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_mid = np.nan
    for it in range(cfg.iterations):
        exaggerate = it < cfg.exaggeration_iters
        pe = p * cfg.early_exaggeration if exaggerate else p
        diff = y[:, None, :] - y[None, :, :]
        num = 1.0 / (1.0 + np.square(diff).sum(-1))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        if it == cfg.exaggeration_iters:
            kl_mid = _kl(p, q)
        grad = 4.0 * (((pe - q) * num)[:, :, None] * diff).sum(axis=1)
        momentum = cfg.momentum if exaggerate else cfg.final_momentum
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - cfg.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)

    diff = y[:, None, :] - y[None, :, :]
    num = 1.0 / (1.0 + np.square(diff).sum(-1))
    np.fill_diagonal(num, 0.0)
    final = _kl(p, np.maximum(num / num.sum(), 1e-12))
    return Projection2D(y, final, kl_mid, perplexity, tuple(unmatched))


def position_colors(cells: np.ndarray) -> list[str]:
    """Hue from grid column, lightness from grid row, so that cells keep
    recognizable colors across the original and projected plots."""
    cells = np.asarray(cells, dtype=float)
    span = np.maximum(cells.max(axis=0) - cells.min(axis=0), 1.0)
    rel = (cells - cells.min(axis=0)) / span
    out = []
    for r, c in rel:
        red, green, blue = colorsys.hls_to_rgb(0.8 * c, 0.3 + 0.4 * r, 0.75)
        out.append(f"#{int(red * 255):02x}{int(green * 255):02x}{int(blue * 255):02x}")
    return out


CLUSTER_PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#bcbd22", "#17becf", "#393b79",
]
SUBGOAL_GRAY = "#9e9e9e"


def label_colors(labels: Sequence[int]) -> list[str]:
    return [SUBGOAL_GRAY if lab < 0 else CLUSTER_PALETTE[lab % len(CLUSTER_PALETTE)] for lab in labels]


def _star(cx: float, cy: float, r: float) -> str:
    pts = []
    for k in range(10):
        ang = -np.pi / 2 + k * np.pi / 5
        rad = r if k % 2 == 0 else 0.45 * r
        pts.append(f"{cx + rad * np.cos(ang):.2f},{cy + rad * np.sin(ang):.2f}")
    return f'<polygon class="reference" points="{" ".join(pts)}" fill="#e41a1c" stroke="black" stroke-width="0.5"/>'


def emit_svg(
    coords: np.ndarray,
    colors: Sequence[str],
    path: str | Path,
    star: int | None = None,
    size: int = 400,
    polyline: Sequence[int] | None = None,
) -> None:
    """Scatter plot, one circle per point; ``star`` marks the reference row."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if not np.isfinite(coords).all():
        raise ValueError("coordinates must be finite")
    pad = 20.0
    lo = coords.min(axis=0)
    span = np.maximum(coords.max(axis=0) - lo, 1e-12)
    scale = (size - 2 * pad) / span.max()
    xy = pad + (coords - lo) * scale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if polyline is not None and len(polyline) > 1:
        pts = " ".join(f"{xy[i, 0]:.2f},{xy[i, 1]:.2f}" for i in polyline)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="2"/>')
    for (x, y), color in zip(xy, colors):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{color}" stroke="black" stroke-width="0.3"/>')
    if star is not None:
        parts.append(_star(xy[star, 0], xy[star, 1], 9.0))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def grid_layout(cells: np.ndarray) -> np.ndarray:
    """(row, col) -> (x, y) plotting positions for the original-space view."""
    cells = np.asarray(cells, dtype=float)
    return np.column_stack([cells[:, 1], cells[:, 0]])
