"""Embedding tables and the reference-conditioned symmetric distance d_r."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EncoderParams, Role, Similarity, encode, similarity_matrix


@dataclass(frozen=True)
class EmbeddingTable:
    states: np.ndarray
    phi: np.ndarray
    psi: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def row(self, state: int) -> int:
        hits = np.flatnonzero(self.states == state)
        if not len(hits):
            raise KeyError(f"state {state} is not in the table")
        return int(hits[0])

    def scores(self, sim: Similarity) -> np.ndarray:
        """S[i, j] = d(phi(states[i]), psi(states[j]))."""
        return similarity_matrix(sim, self.phi, self.psi)


def embed_all(params: EncoderParams, states, features: np.ndarray) -> EmbeddingTable:
    states = np.asarray(states, dtype=np.int64).reshape(-1)
    feats = np.asarray(features, dtype=float)[states]
    return EmbeddingTable(
        states, encode(params, Role.OUTGOING, feats), encode(params, Role.INCOMING, feats)
    )


@dataclass(frozen=True)
class ReferenceDistanceMatrix:
    reference: int
    states: np.ndarray
    d: np.ndarray
    anchor_scores: np.ndarray


def _closer_mask(anchor: np.ndarray, states: np.ndarray) -> np.ndarray:
    """closer[i, j]: state i plays the outgoing role against state j."""
    a_i, a_j = anchor[:, None], anchor[None, :]
    tie = (a_i == a_j) & (states[:, None] < states[None, :])
    return (a_i > a_j) | tie


def reference_distance(table: EmbeddingTable, sim: Similarity, reference: int,
                       scores: np.ndarray | None = None) -> ReferenceDistanceMatrix:
    """d_r(u, v) = 1 - d(phi(w), psi(w')) where w is whichever of u, v the
    reference state scores higher as a successor; ties go to the smaller
    state index. The diagonal holds 1 - d(phi(u), psi(u)).
    """
    r = table.row(reference)
    s = table.scores(sim) if scores is None else scores
    anchor = s[r]
    closer = _closer_mask(anchor, table.states)
    dist = np.where(closer, 1.0 - s, 1.0 - s.T)
    np.fill_diagonal(dist, 1.0 - np.diag(s))
    return ReferenceDistanceMatrix(int(reference), table.states, dist, anchor.copy())


def all_reference_matrices(table: EmbeddingTable, sim: Similarity) -> dict[int, ReferenceDistanceMatrix]:
    s = table.scores(sim)
    return {int(r): reference_distance(table, sim, int(r), s) for r in table.states}
