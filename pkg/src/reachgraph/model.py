"""Asymmetric two-encoder model and its binary NCE objective.

The score of an ordered pair is f(x; y) = d(psi(x), phi(y)): the preceding
state y goes through the outgoing encoder phi, the later state x through
the incoming encoder psi. A symmetric parameter set has phi only and uses
it for both slots.

All math is float64 with hand-written reverse-mode gradients.
"""
from __future__ import annotations

import enum
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pair_sampler import TrainingBatch

NORM_EPS = 1e-8
LAYERS = ("W1", "b1", "W2", "b2")


class Role(str, enum.Enum):
    OUTGOING = "phi"
    INCOMING = "psi"


class SimilarityKind(str, enum.Enum):
    COSINE = "cosine"
    SCALED_COSINE = "scaled_cosine"
    DOT = "dot"


@dataclass(frozen=True)
class Similarity:
    kind: SimilarityKind = SimilarityKind.COSINE
    tau: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SimilarityKind(self.kind))
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def normalized(self) -> bool:
        return self.kind is not SimilarityKind.DOT

    @property
    def scale(self) -> float:
        return 1.0 / self.tau if self.kind is SimilarityKind.SCALED_COSINE else 1.0

    def __str__(self) -> str:
        return self.kind.value


COSINE = Similarity()
DOT = Similarity(SimilarityKind.DOT)


@dataclass
class EncoderParams:
    """Named float64 tensors ``phi.W1`` ... ``psi.b2`` (no psi when symmetric).

    The tensors are views into one contiguous ``buffer`` so optimizers can
    update every parameter in a single vectorized pass.
    """

    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    buffer: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.buffer = np.empty(sum(np.size(v) for v in self.tensors.values()))
        packed, offset = {}, 0
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype=float)
            view = self.buffer[offset : offset + arr.size].reshape(arr.shape)
            view[...] = arr
            packed[name] = view
            offset += arr.size
        self.tensors = packed

    @property
    def symmetric(self) -> bool:
        return "psi.W1" not in self.tensors

    @property
    def hidden(self) -> int:
        return self.tensors["phi.W1"].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.tensors["phi.W2"].shape[0]

    def layer(self, role: Role | str, name: str) -> np.ndarray:
        role = Role(role)
        if role is Role.INCOMING and self.symmetric:
            role = Role.OUTGOING
        return self.tensors[f"{role.value}.{name}"]

    def copy(self) -> EncoderParams:
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))

    def zeros_like(self) -> EncoderParams:
        return EncoderParams({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return self.buffer.copy()

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.buffer).all())


def init_params(
    hidden: int = 256,
    latent_dim: int = 64,
    seed: int = 0,
    symmetric: bool = False,
    in_dim: int = 2,
) -> EncoderParams:
    """Glorot-uniform weights, zero biases; phi and psi drawn independently."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for role in (Role.OUTGOING,) if symmetric else (Role.OUTGOING, Role.INCOMING):
        for name, fan_in, fan_out in (("1", in_dim, hidden), ("2", hidden, latent_dim)):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"{role.value}.W{name}"] = rng.uniform(-a, a, size=(fan_out, fan_in))
            tensors[f"{role.value}.b{name}"] = np.zeros(fan_out)
    return EncoderParams(tensors)


def _forward(params: EncoderParams, role: Role, feats: np.ndarray):
    hid = np.tanh(feats @ params.layer(role, "W1").T + params.layer(role, "b1"))
    return hid @ params.layer(role, "W2").T + params.layer(role, "b2"), hid


def encode(params: EncoderParams, role: Role | str, feats: np.ndarray) -> np.ndarray:
    """Latent vector(s) for normalized input coordinates (one row per input)."""
    feats = np.asarray(feats, dtype=float)
    out, _ = _forward(params, Role(role), np.atleast_2d(feats))
    return out[0] if feats.ndim == 1 else out


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / (norm + NORM_EPS), norm


def _unit_backward(v: np.ndarray, norm: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a gradient on v / (|v| + eps) back onto v."""
    denom = norm + NORM_EPS
    with np.errstate(invalid="ignore", divide="ignore"):
        radial = np.where(norm > 0, (g * v).sum(-1, keepdims=True) / (norm * denom * denom), 0.0)
    return g / denom - v * radial


def similarity(sim: Similarity, incoming: np.ndarray, outgoing: np.ndarray) -> np.ndarray:
    """Row-wise d(incoming_i, outgoing_i)."""
    if sim.normalized:
        incoming, _ = _unit(incoming)
        outgoing, _ = _unit(outgoing)
    return sim.scale * (incoming * outgoing).sum(-1)


def similarity_matrix(sim: Similarity, outgoing: np.ndarray, incoming: np.ndarray) -> np.ndarray:
    """M[i, j] = d(incoming_j, outgoing_i): row = preceding state, column = later state."""
    if sim.normalized:
        incoming, _ = _unit(incoming)
        outgoing, _ = _unit(outgoing)
    return sim.scale * (outgoing @ incoming.T)


def score(params: EncoderParams, sim: Similarity, x: np.ndarray, y: np.ndarray) -> np.ndarray | float:
    """f(x; y) = d(psi(x), phi(y)) for features x (later) and y (preceding)."""
    out = similarity(
        sim,
        np.atleast_2d(encode(params, Role.INCOMING, x)),
        np.atleast_2d(encode(params, Role.OUTGOING, y)),
    )
    return float(out[0]) if np.ndim(x) == 1 else out


def score_symmetric(params: EncoderParams, x: np.ndarray, y: np.ndarray, sim: Similarity = COSINE):
    """d(phi(x), phi(y)) with the single outgoing encoder."""
    ex = np.atleast_2d(encode(params, Role.OUTGOING, x))
    ey = np.atleast_2d(encode(params, Role.OUTGOING, y))
    out = similarity(sim, ex, ey)
    return float(out[0]) if np.ndim(x) == 1 else out


@dataclass(frozen=True)
class LossReport:
    objective: float
    positive_accuracy: float
    negative_accuracy: float


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_sigmoid(z))


def _evaluate(params, sim, batch: TrainingBatch, k_ratio: int, features: np.ndarray, want_grad: bool):
    """Objective and (optionally) its gradient, computed on unique states.

    Pairs are collapsed into count matrices over the states the batch
    touches, so the score matrix is evaluated once per unique (y, x).
    """
    states, inv = np.unique(
        np.concatenate([batch.y_pos, batch.x_pos, batch.y_neg, batch.x_neg]), return_inverse=True
    )
    u = len(states)
    n_pos, n_neg = len(batch.y_pos), len(batch.y_neg)
    yp, xp, yn, xn = np.split(inv, np.cumsum([n_pos, n_pos, n_neg]))
    w_pos = np.bincount(yp * u + xp, minlength=u * u).reshape(u, u) / n_pos
    w_neg = (
        np.bincount(yn * u + xn, minlength=u * u).reshape(u, u) * (k_ratio / n_neg)
        if n_neg else np.zeros((u, u))
    )

    feats = features[states]
    out_raw, out_hid = _forward(params, Role.OUTGOING, feats)
    if params.symmetric:
        in_raw, in_hid = out_raw, out_hid
    else:
        in_raw, in_hid = _forward(params, Role.INCOMING, feats)
    if sim.normalized:
        out_vec, out_norm = _unit(out_raw)
        in_vec, in_norm = _unit(in_raw)
    else:
        out_vec, in_vec = out_raw, in_raw
    f = sim.scale * (out_vec @ in_vec.T)

    # only pairs present in the batch contribute
    rows, cols = np.nonzero(w_pos + w_neg)
    f_live, wp, wn = f[rows, cols], w_pos[rows, cols], w_neg[rows, cols]
    objective = float(wp @ _log_sigmoid(f_live) + wn @ _log_sigmoid(-f_live))
    pos_acc = float(wp @ (f_live > 0) / max(wp.sum(), 1e-300))
    neg_acc = float(wn @ (f_live < 0) / max(wn.sum(), 1e-300)) if n_neg else float("nan")
    report = LossReport(objective, pos_acc, neg_acc)
    if not want_grad:
        return report, None

    sig = _sigmoid(f_live)
    # d(-objective)/df
    g = np.zeros((u, u))
    g[rows, cols] = -(wp * (1.0 - sig) - wn * sig) * sim.scale
    d_out = g @ in_vec
    d_in = g.T @ out_vec
    if sim.normalized:
        d_out = _unit_backward(out_raw, out_norm, d_out)
        d_in = _unit_backward(in_raw, in_norm, d_in)

    grads = params.zeros_like()
    if params.symmetric:
        _backprop(params, Role.OUTGOING, feats, out_hid, d_out + d_in, grads)
    else:
        _backprop(params, Role.OUTGOING, feats, out_hid, d_out, grads)
        _backprop(params, Role.INCOMING, feats, in_hid, d_in, grads)
    return report, grads


def _backprop(params, role: Role, feats, hid, d_vec, grads: EncoderParams) -> None:
    key = role.value
    grads.tensors[f"{key}.W2"] += d_vec.T @ hid
    grads.tensors[f"{key}.b2"] += d_vec.sum(0)
    d_pre = (d_vec @ params.layer(role, "W2")) * (1.0 - hid * hid)
    grads.tensors[f"{key}.W1"] += d_pre.T @ feats
    grads.tensors[f"{key}.b1"] += d_pre.sum(0)


def nce_loss(
    params: EncoderParams, sim: Similarity, batch: TrainingBatch, k_ratio: int, features: np.ndarray
) -> LossReport:
    """Mean log sigma(f) over positives plus K times mean log(1 - sigma(f)) over negatives."""
    report, _ = _evaluate(params, sim, batch, k_ratio, features, want_grad=False)
    return report


def grad(
    params: EncoderParams, sim: Similarity, batch: TrainingBatch, k_ratio: int, features: np.ndarray
) -> EncoderParams:
    """Gradient of the negated objective, same layout as ``params``."""
    return loss_and_grad(params, sim, batch, k_ratio, features)[1]


def loss_and_grad(params, sim, batch, k_ratio, features) -> tuple[LossReport, EncoderParams]:
    if batch.size == 0:
        raise ValueError("empty batch")
    return _evaluate(params, sim, batch, k_ratio, np.asarray(features, dtype=float), want_grad=True)


CKPT_MAGIC = "reachgraph-ckpt v1"


def save_checkpoint(params: EncoderParams, path: str | Path, **meta: object) -> None:
    """Write parameters as text; floats use repr, which round-trips exactly.

    The file is written to a temporary sibling and renamed into place.
    """
    path = Path(path)
    info = {**params.meta, **{k: str(v) for k, v in meta.items()}}
    lines = [CKPT_MAGIC, "meta " + " ".join(f"{k}={v}" for k, v in info.items())]
    for name, arr in params.tensors.items():
        mat = np.atleast_2d(arr) if arr.ndim == 1 else arr
        lines.append(f"tensor {name} {' '.join(map(str, arr.shape))}")
        lines.extend(",".join(repr(float(v)) for v in row) for row in mat.tolist())
    lines.append("end")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> EncoderParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} file")
    meta = dict(tok.split("=", 1) for tok in lines[1].split()[1:])
    tensors = {}
    i = 2
    while lines[i] != "end":
        _, name, *shape = lines[i].split()
        dims = tuple(int(s) for s in shape)
        rows = dims[0] if len(dims) == 2 else 1
        body = [[float(v) for v in line.split(",")] for line in lines[i + 1 : i + 1 + rows]]
        tensors[name] = np.array(body, dtype=float).reshape(dims)
        i += 1 + rows
    return EncoderParams(tensors, meta)
