"""ZSL / GZSL prediction with calibrated stacking and the S/U/H protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PoseBridgeError


@dataclass
class Metrics:
    zsl_acc: float
    S: float
    U: float
    H: float
    kappa: float
    per_class: dict[int, float] = field(default_factory=dict)
    classes: list[int] = field(default_factory=list)  # row/column order of the confusion matrix
    confusion: np.ndarray | None = None
    zsl_per_class: dict[int, float] = field(default_factory=dict)

    def to_json(self, seed: int | None = None, split_id: str | None = None) -> dict:
        return {
            "zsl_acc": self.zsl_acc,
            "S": self.S,
            "U": self.U,
            "H": self.H,
            "kappa": self.kappa,
            "seed": seed,
            "split_id": split_id,
            "classes": list(self.classes),
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "zsl_per_class": {str(k): v for k, v in self.zsl_per_class.items()},
            "confusion": self.confusion.tolist() if self.confusion is not None else [],
        }


def _argmax_first(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest id when ids are sorted
    return np.argmax(scores, axis=-1)


def zsl_predict(z: np.ndarray, unseen_ids, unseen_protos: np.ndarray) -> np.ndarray:
    """Argmax of ``z . t_c`` over unseen classes (ids sorted ascending)."""
    unseen_ids = np.asarray(unseen_ids)
    if unseen_ids.size == 0:
        raise PoseBridgeError("no unseen prototypes")
    order = np.argsort(unseen_ids, kind="stable")
    scores = np.atleast_2d(z) @ np.asarray(unseen_protos)[order].T
    return unseen_ids[order][_argmax_first(scores)]


def gzsl_scores(z: np.ndarray, class_ids, protos: np.ndarray, seen_mask, kappa: float) -> np.ndarray:
    if kappa < 0:
        raise PoseBridgeError("kappa must be nonnegative")
    return np.atleast_2d(z) @ np.asarray(protos).T - kappa * np.asarray(seen_mask, dtype=float)


def gzsl_predict(z: np.ndarray, class_ids, protos: np.ndarray, seen_mask, kappa: float = 0.1) -> np.ndarray:
    """Calibrated stacking: seen scores are lowered by ``kappa`` before the argmax."""
    class_ids = np.asarray(class_ids)
    order = np.argsort(class_ids, kind="stable")
    scores = gzsl_scores(z, class_ids[order], np.asarray(protos)[order], np.asarray(seen_mask)[order], kappa)
    return class_ids[order][_argmax_first(scores)]


def harmonic_mean(s: float, u: float) -> float:
    if s < 0 or u < 0:
        raise PoseBridgeError("accuracies must be nonnegative")
    return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


def _accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.mean(pred == true)) if true.size else 0.0


def evaluate(z: np.ndarray, labels, table, kappa: float = 0.1) -> Metrics:
    """Metrics for matching embeddings ``z`` (N, D) against ``table.adapted``.

    ZSL accuracy is over unseen-labelled samples; S and U come from GZSL
    predictions on seen- and unseen-labelled samples. All accuracies are
    per-sample averages.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise PoseBridgeError("empty evaluation split")
    seen, unseen = list(table.seen), list(table.unseen)
    classes = sorted(seen + unseen)
    stray = sorted(set(labels.tolist()) - set(classes))
    if stray:
        raise PoseBridgeError(f"labels {stray} are not declared classes")
    protos = table.matrix(classes, adapted=True)
    seen_mask = np.isin(classes, seen)
    pred = gzsl_predict(z, classes, protos, seen_mask, kappa)
    is_u = np.isin(labels, unseen)
    zsl = zsl_predict(z[is_u], unseen, table.matrix(unseen, adapted=True)) if is_u.any() else np.array([])
    s = _accuracy(pred[~is_u], labels[~is_u])
    u = _accuracy(pred[is_u], labels[is_u])
    pos = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=int)
    np.add.at(conf, ([pos[c] for c in labels.tolist()], [pos[c] for c in pred.tolist()]), 1)
    per_class = {c: _accuracy(pred[labels == c], labels[labels == c]) for c in classes if np.any(labels == c)}
    lu = labels[is_u]
    zsl_per_class = {c: _accuracy(zsl[lu == c], lu[lu == c]) for c in unseen if np.any(lu == c)}
    return Metrics(_accuracy(zsl, lu), s, u, harmonic_mean(s, u), float(kappa), per_class, classes, conf,
                   zsl_per_class)


def unseen_chain(z: np.ndarray, class_ids, protos, seen_mask, grid) -> list[set[int]]:
    """For each kappa in ``grid``, the indices of samples predicted as unseen."""
    class_ids = np.asarray(class_ids)
    unseen_set = set(class_ids[~np.asarray(seen_mask)].tolist())
    out = []
    for k in grid:
        pred = gzsl_predict(z, class_ids, protos, seen_mask, k)
        out.append({i for i, c in enumerate(pred.tolist()) if c in unseen_set})
    return out


def sweep_kappa(z_val: np.ndarray, val_labels, table, grid) -> float:
    """Calibration constant maximising H on a validation slice; smaller kappa wins ties.

    ``table`` declares which validation classes play the seen and unseen roles.
    """
    grid = sorted(grid)
    if not grid:
        raise PoseBridgeError("empty kappa grid")
    best_k, best_h = grid[0], -1.0
    for k in grid:
        h = evaluate(z_val, val_labels, table, k).H
        if h > best_h:
            best_k, best_h = k, h
    return float(best_k)
