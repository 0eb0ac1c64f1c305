"""Training losses: classification, semantic matching, supervised contrast and alignment.

Labels are row indices into the seen-class table (0 .. C-1); use
:func:`label_indices` to map class ids.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .errors import ContractViolation, PoseBridgeError, ShapeError
from .numerics import Tensor, ops, value_of
from .numerics import functional as F

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    s_cls: float = 1.0
    s_sem: float = 1.5
    s_con: float = 1.5
    p_cls: float = 0.5
    p_sem: float = 0.5
    p_con: float = 0.3
    s2p: float = 0.3
    kd: float = 1.0
    b_sem: float = 1.0
    b_con: float = 0.5
    tau_supcon: float = 0.07
    tau_d: float = 4.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.startswith("tau"):
                if v <= 0:
                    raise PoseBridgeError(f"{k} must be positive")
            elif v < 0:
                raise PoseBridgeError(f"loss weight {k} must be nonnegative")


def label_indices(labels, class_ids) -> np.ndarray:
    """Map class ids to positions in ``class_ids``; unknown ids violate the seen-only contract."""
    pos = {int(c): i for i, c in enumerate(class_ids)}
    bad = sorted({int(y) for y in labels if int(y) not in pos})
    if bad:
        raise ContractViolation(f"labels {bad} are not seen classes")
    return np.array([pos[int(y)] for y in labels], dtype=int)


def _onehot(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    if y.ndim != 1:
        raise ShapeError("labels must be a 1-D index array")
    if np.any(y < 0) or np.any(y >= n):
        raise ContractViolation(f"label index outside the {n} seen classes")
    out = np.zeros((y.size, n))
    out[np.arange(y.size), y] = 1.0
    return out


def cls_loss(z, y, weight, bias=None):
    """Cross-entropy of a linear seen-class classifier."""
    logits = F.linear(z, weight, bias)
    return F.cross_entropy(logits, _onehot(y, value_of(logits).shape[-1]))


def sem_loss(z, y, protos):
    """Cross-entropy over raw cosine logits ``z T^T`` (no temperature)."""
    logits = ops.matmul(z, ops.transpose(protos))
    return F.cross_entropy(logits, _onehot(y, value_of(protos).shape[0]))


def supcon_loss(z, y, tau: float = 0.07):
    """Supervised contrastive loss; every other batch member is in the denominator.

    Anchors with no same-label partner are left out of the mean.
    """
    y = np.asarray(y)
    b = y.size
    if b < 2:
        raise PoseBridgeError("supervised contrast needs a batch of at least two")
    eye = np.eye(b)
    pos = (y[:, None] == y[None, :]).astype(float) - eye
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise PoseBridgeError("no anchor has a positive partner")
    sim = ops.mul(ops.matmul(z, ops.transpose(z)), 1.0 / tau)
    # self-similarity is removed from every denominator
    logp = ops.log_softmax(ops.add(sim, -1e9 * eye), axis=1)
    coef = np.where(anchors, 1.0 / np.maximum(n_pos, 1.0), 0.0)[:, None] * pos
    return ops.mul(ops.sum(ops.mul(logp, coef)), -1.0 / anchors.sum())


def kl_term(z_s, z_p, protos, tau_d: float = 4.0):
    """Mean KL(teacher from z_p, gradient stopped || student from z_s)."""
    pt = ops.transpose(protos)
    teacher = ops.softmax(ops.mul(ops.matmul(ops.stop_gradient(z_p), pt), 1.0 / tau_d), axis=-1)
    student = ops.softmax(ops.mul(ops.matmul(z_s, pt), 1.0 / tau_d), axis=-1)
    lp = ops.log(ops.clamp_min(teacher, floor=KL_FLOOR))
    lq = ops.log(ops.clamp_min(student, floor=KL_FLOOR))
    kl = ops.sum(ops.mul(teacher, ops.sub(lp, lq)), axis=-1)
    return ops.mean(kl)


def cosine_term(z_s, z_p):
    """Mean of 1 - <z_s, z_p> over the batch (inputs are unit vectors)."""
    return ops.sub(1.0, ops.mean(ops.sum(ops.mul(z_s, z_p), axis=-1)))


def align_loss(z_s, z_p, protos, lambda_s2p: float = 0.3, lambda_kd: float = 1.0, tau_d: float = 4.0):
    return ops.add(ops.mul(cosine_term(z_s, z_p), lambda_s2p), ops.mul(kl_term(z_s, z_p, protos, tau_d), lambda_kd))


def branch_loss(z, y, protos, w: LossWeights, prefix: str, head=None):
    """Weighted cls + sem + con for one embedding branch; ``head`` is (W, b) or None."""
    wc, ws, wn = (getattr(w, f"{prefix}_{k}", 0.0) for k in ("cls", "sem", "con"))
    total = Tensor(np.array(0.0))
    if head is not None and wc:
        total = ops.add(total, ops.mul(cls_loss(z, y, *head), wc))
    if ws:
        total = ops.add(total, ops.mul(sem_loss(z, y, protos), ws))
    if wn:
        total = ops.add(total, ops.mul(supcon_loss(z, y, w.tau_supcon), wn))
    return total


def total_loss(emb, y, protos, weights: LossWeights, params: Mapping | None = None):
    """Weighted total and its four named parts (``s``, ``p``, ``b``, ``align``).

    ``emb`` is an :class:`~posebridge.model.EmbeddingTriple`; missing branches
    contribute zero. The bridge branch never has a classifier term.
    """
    z_s, z_p, z_b = emb
    params = params or {}
    head_s = (params["cls_s/w"], params["cls_s/b"]) if "cls_s/w" in params else None
    head_p = (params["cls_p/w"], params["cls_p/b"]) if "cls_p/w" in params else None
    zero = Tensor(np.array(0.0))
    parts = {
        "s": branch_loss(z_s, y, protos, weights, "s", head_s),
        "p": branch_loss(z_p, y, protos, weights, "p", head_p) if z_p is not None else zero,
        "b": branch_loss(z_b, y, protos, weights, "b") if z_b is not None else zero,
        "align": (align_loss(z_s, z_p, protos, weights.s2p, weights.kd, weights.tau_d)
                  if z_p is not None else zero),
    }
    total = ops.add(ops.add(parts["s"], parts["p"]), ops.add(parts["b"], parts["align"]))
    return total, parts
