"""Prototype adaptation toward the pose-semantic space.

Seen classes blend their text prototype with the class centroid of pose
embeddings. Unseen classes borrow the text-to-pose displacement of their
nearest seen classes; they never look at unseen samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, PoseBridgeError
from .numerics import Tensor, ops

UNIT_TOL = 1e-10


def _normalize(v: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n <= 1e-12:
        raise DegenerateError(f"{what} has zero norm")
    return v / n


@dataclass
class PrototypeTable:
    """Unit text prototypes keyed by class id, plus the seen/unseen partition."""

    vectors: dict[int, np.ndarray]
    seen: list[int]
    unseen: list[int]
    adapted: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.seen = sorted(int(c) for c in self.seen)
        self.unseen = sorted(int(c) for c in self.unseen)
        if set(self.seen) & set(self.unseen):
            raise PoseBridgeError("seen and unseen classes overlap")
        missing = [c for c in self.seen + self.unseen if c not in self.vectors]
        if missing:
            raise PoseBridgeError(f"no prototype for classes {missing}")
        for c, v in self.vectors.items():
            if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
                raise PoseBridgeError(f"prototype {c} is not unit-norm")

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, seen, unseen) -> "PrototypeTable":
        return cls({i: np.asarray(row, dtype=np.float64) for i, row in enumerate(matrix)}, seen, unseen)

    def matrix(self, ids, adapted: bool = False) -> np.ndarray:
        src = self.adapted if adapted else self.vectors
        return np.stack([src[c] for c in ids])

    def with_adapted(self, adapted: dict[int, np.ndarray]) -> "PrototypeTable":
        return PrototypeTable(self.vectors, self.seen, self.unseen, dict(adapted))


@dataclass
class CentroidTable:
    centroids: dict[int, np.ndarray]
    counts: dict[int, int]


def compute_centroids(z_p: np.ndarray, labels, seen_ids) -> CentroidTable:
    """Per-class mean of pose-semantic embeddings, renormalised to unit length."""
    z_p = np.asarray(z_p, dtype=np.float64)
    labels = np.asarray(labels)
    empty = [int(c) for c in seen_ids if not np.any(labels == c)]
    if empty:
        raise PoseBridgeError(f"seen classes without training samples: {empty}")
    cents, counts = {}, {}
    for c in seen_ids:
        rows = z_p[labels == c]
        cents[int(c)] = _normalize(rows.mean(axis=0), f"centroid of class {c}")
        counts[int(c)] = int(rows.shape[0])
    return CentroidTable(cents, counts)


def _result(out: Tensor, *inputs):
    # arrays in, array out; tensors in, tensor out (so the adaptation can be gradient-checked)
    return out if any(isinstance(x, Tensor) for x in inputs) else out.value


def adapt_seen(t, mu, rho: float = 0.2):
    if not 0.0 <= rho <= 1.0:
        raise PoseBridgeError("rho must lie in [0, 1]")
    blend = ops.add(ops.mul(t, 1.0 - rho), ops.mul(mu, rho))
    return _result(ops.l2_normalize(blend), t, mu)


def nearest_seen(t: np.ndarray, table: PrototypeTable, k: int = 5) -> list[int]:
    """The ``k`` seen ids most similar to ``t``; ties go to the smaller id."""
    if k > len(table.seen):
        raise PoseBridgeError(f"K={k} exceeds the {len(table.seen)} seen classes")
    if k < 1:
        raise PoseBridgeError("K must be positive")
    sims = [(-float(t @ table.vectors[c]), c) for c in table.seen]
    return [c for _, c in sorted(sims)[:k]]


def neighbor_weights(t, neighbor_protos, tau_a: float = 0.07):
    """Softmax over neighbours of ``t . t_j / tau_a``."""
    w = ops.softmax(ops.mul(ops.matmul(neighbor_protos, t), 1.0 / tau_a))
    return _result(w, t, neighbor_protos)


def displace(t, protos, mus, rho: float = 0.2, tau_a: float = 0.07):
    """``normalize(t + rho * sum_j w_j (mu_j - t_j))`` on stacked neighbour rows."""
    w = ops.softmax(ops.mul(ops.matmul(protos, t), 1.0 / tau_a))
    shift = ops.matmul(w, ops.sub(mus, protos))
    return _result(ops.l2_normalize(ops.add(t, ops.mul(shift, rho))), t, protos, mus)


def adapt_unseen(t, neighbors, centroids: CentroidTable, seen_prototypes: dict[int, np.ndarray],
                 rho: float = 0.2, tau_a: float = 0.07) -> np.ndarray:
    """Shift ``t`` by the similarity-weighted seen displacements ``mu_j - t_j``."""
    neighbors = list(neighbors)
    if not neighbors:
        raise PoseBridgeError("unseen adaptation needs at least one neighbour")
    protos = np.stack([seen_prototypes[j] for j in neighbors])
    mus = np.stack([centroids.centroids[j] for j in neighbors])
    return displace(t, protos, mus, rho, tau_a)


def adapt_table(table: PrototypeTable, centroids: CentroidTable, rho: float = 0.2, k: int = 5,
                tau_a: float = 0.07) -> PrototypeTable:
    """Adapted vectors for every class, computed from seen-side data only."""
    missing = [c for c in table.seen if c not in centroids.centroids]
    if missing:
        raise PoseBridgeError(f"no centroid for seen classes {missing}")
    adapted = {c: adapt_seen(table.vectors[c], centroids.centroids[c], rho) for c in table.seen}
    seen_protos = {c: table.vectors[c] for c in table.seen}
    for c in table.unseen:
        nb = nearest_seen(table.vectors[c], table, k)
        adapted[c] = adapt_unseen(table.vectors[c], nb, centroids, seen_protos, rho, tau_a)
    return table.with_adapted(adapted)


def identity_table(table: PrototypeTable) -> PrototypeTable:
    """Use the raw text prototypes as the 'adapted' ones (adaptation switched off)."""
    return table.with_adapted({c: table.vectors[c] for c in table.seen + table.unseen})
