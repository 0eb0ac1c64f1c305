"""Optimiser, schedule, EMA and the seen-class training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .errors import ContractViolation, NonFiniteError, PoseBridgeError, ShapeError
from .numerics import Tape
from .model import embed, forward, init_model_params
from .objectives import LossWeights, label_indices, total_loss
from .params import ParameterStore
from .prototypes import compute_centroids
from .rng import make_rng


@dataclass(frozen=True)
class Schedule:
    lr: float = 1e-3
    weight_decay: float = 2e-3
    warmup_epochs: int = 5
    epochs: int = 30
    min_lr: float = 1e-6
    batch_size: int = 128
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise PoseBridgeError("need 0 <= warmup_epochs < epochs")
        if self.min_lr > self.lr:
            raise PoseBridgeError("min_lr must not exceed lr")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: Schedule, steps_per_epoch: int | None = None) -> float:
    """Linear warm-up from 0 to the base rate, then cosine decay to ``min_lr``."""
    if steps_per_epoch is not None:
        schedule = replace(schedule, steps_per_epoch=steps_per_epoch)
    warm, total = schedule.warmup_steps, schedule.total_steps
    if step < warm:
        return schedule.lr * step / warm
    if total <= warm:
        return schedule.lr
    progress = min(1.0, (step - warm) / (total - warm))
    return schedule.min_lr + 0.5 * (schedule.lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   state: OptimState, lr: float, wd: float) -> Mapping[str, np.ndarray]:
    """Bias-corrected Adam update with decoupled weight decay, applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= lr * update + lr * wd * theta
    return params


class AdamW:
    def __init__(self, store: ParameterStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.state = OptimState.zeros_like(store.arrays, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping[str, np.ndarray], lr: float, wd: float) -> None:
        optimizer_step(self.store.arrays, grads, self.state, lr, wd)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return dict(grads)


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.999
    start_epoch: int = 5

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], decay: float = 0.999, start_epoch: int = 5) -> "EmaState":
        return cls({k: v.copy() for k, v in params.items()}, decay, start_epoch)


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray], epoch: int) -> EmaState:
    """Copy parameters before ``start_epoch``; exponential blend from then on."""
    if epoch < 0:
        raise PoseBridgeError("epoch must be nonnegative")
    for name, value in params.items():
        sh = ema.shadow[name]
        if sh.shape != value.shape:
            raise ShapeError(f"EMA shadow {name!r} has shape {sh.shape}, expected {value.shape}")
        if epoch < ema.start_epoch:
            sh[...] = value
        else:
            sh *= ema.decay
            sh += (1.0 - ema.decay) * value
    return ema


# --- training loop ----------------------------------------------------------------------


@dataclass
class FeatureSet:
    """Model inputs for a set of videos: skeletons, sampled cues and class ids."""

    skeletons: np.ndarray  # (N, T, J, 2)
    cues: np.ndarray | None  # (N, n, d)
    labels: np.ndarray  # (N,) class ids

    def __post_init__(self):
        n = len(self.labels)
        if self.skeletons.shape[0] != n or (self.cues is not None and self.cues.shape[0] != n):
            raise ShapeError("skeletons, cues and labels disagree on the sample count")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "FeatureSet":
        return FeatureSet(self.skeletons[idx], None if self.cues is None else self.cues[idx], self.labels[idx])


@dataclass(frozen=True)
class TrainConfig:
    schedule: Schedule = Schedule()
    ema_decay: float = 0.999
    ema_start_epoch: int = 5
    clip_norm: float = 1.0
    seed: int = 0


@dataclass
class TrainResult:
    model_config: object
    params: ParameterStore  # raw weights
    ema: dict[str, np.ndarray]
    log: list[dict]
    centroids: object  # CentroidTable, or None without the cue branch
    initial: dict[str, np.ndarray]


def _batch_loss(p, model_cfg, protos, weights, data: FeatureSet, seen_ids, rng=None):
    emb = forward(p, model_cfg, data.skeletons, data.cues, rng=rng)
    return total_loss(emb, label_indices(data.labels, seen_ids), protos, weights, p)


def _record(epoch: int, lr: float, rows: list[tuple[float, ...]]) -> dict:
    m = np.mean(np.array(rows), axis=0)
    keys = ("loss_total", "loss_s", "loss_p", "loss_b", "loss_align")
    return {"epoch": epoch, "lr": float(lr), **{k: float(v) for k, v in zip(keys, m)}}


def _loss_row(total, parts) -> tuple[float, ...]:
    return (total.item(),) + tuple(parts[k].item() for k in ("s", "p", "b", "align"))


def train(cfg: TrainConfig, model_cfg, data: FeatureSet, prototypes, weights=None) -> TrainResult:
    """Seen-only training with AdamW, warm-up + cosine, clipping and EMA.

    The log holds an epoch-0 record (initial weights, whole set, no dropout)
    and one record per epoch with step-averaged losses.
    """
    weights = weights or LossWeights()
    seen = list(prototypes.seen)
    bad = sorted(set(int(c) for c in data.labels) - set(seen))
    if bad:
        raise ContractViolation(f"training data contains unseen classes {bad}")
    if model_cfg.n_seen != len(seen):
        raise ShapeError(f"model has {model_cfg.n_seen} seen logits for {len(seen)} seen classes")
    protos = prototypes.matrix(seen)
    store = init_model_params(model_cfg, cfg.seed)
    initial = {k: v.copy() for k, v in store.items()}
    sched = cfg.schedule
    n = len(data)
    bs = min(sched.batch_size, n)
    steps = max(1, n // bs)
    ema = EmaState.from_params(store.arrays, cfg.ema_decay, cfg.ema_start_epoch)
    opt = AdamW(store)

    rows = []
    for lo in range(0, n, max(bs, 2)):
        total, parts = _batch_loss(store.arrays, model_cfg, protos, weights, data.take(slice(lo, lo + max(bs, 2))), seen)
        rows.append(_loss_row(total, parts))
    log = [_record(0, 0.0, rows)]

    shuffle = make_rng(cfg.seed, "train-shuffle")
    step = 0
    for epoch in range(sched.epochs):
        order = shuffle.permutation(n)
        rows = []
        for s in range(steps):
            batch = data.take(np.sort(order[s * bs:(s + 1) * bs]))
            with Tape() as tape:
                p = store.watch(tape)
                total, parts = _batch_loss(p, model_cfg, protos, weights, batch, seen,
                                           rng=make_rng(cfg.seed, "dropout", step))
                grads = dict(zip(p, tape.gradient(total, list(p.values()))))
            grads = clip_gradients(grads, cfg.clip_norm)
            step += 1
            lr = lr_at(step, sched, steps)
            opt.step(grads, lr, sched.weight_decay)
            ema_update(ema, store.arrays, epoch)
            rows.append(_loss_row(total, parts))
        log.append(_record(epoch + 1, lr, rows))

    centroids = None
    if model_cfg.use_cues:
        z_p = embed(ema.shadow, model_cfg, data.skeletons, data.cues)["z_p"]
        centroids = compute_centroids(z_p, data.labels, seen)
    return TrainResult(model_cfg, store, {k: v.copy() for k, v in ema.shadow.items()}, log, centroids, initial)
