"""Pose-estimation side: refined features, body-aware pooling and semantic alignment.

Feature maps are channels-last arrays ``(..., H, W, C)``; joint heatmaps are
``(..., J, H, W)``. Leading axes are batch axes and are carried through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateError, PoseBridgeError, ShapeError
from .numerics import Tape, Tensor, ops, value_of
from .numerics import functional as F
from .params import ParameterStore, glorot
from .rng import make_rng


@dataclass
class FeaturePyramid:
    """Shallow-to-deep feature maps of one frame (or a batch of frames)."""

    levels: list

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ShapeError("a feature pyramid needs at least two levels")
        res = [value_of(l).shape[-3:-1] for l in self.levels]
        for (h0, w0), (h1, w1) in zip(res, res[1:]):
            if h1 > h0 or w1 > w0:
                raise ShapeError(f"resolutions must be non-increasing, got {res}")

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [tuple(value_of(l).shape[-3:-1]) for l in self.levels]

    @property
    def channels(self) -> list[int]:
        return [value_of(l).shape[-1] for l in self.levels]


@dataclass
class BodyAttentionMap:
    weights: np.ndarray  # (..., H, W), each map sums to one


@dataclass
class RefineParams:
    projections: list  # per transition, (C_l, C_{l+1})
    kernels: list  # per transition, (3, 3, C_{l+1}, C_{l+1})
    biases: list  # per transition, (C_{l+1},)
    alpha: float = 0.5
    activation: str = "gelu"  # "identity" turns the block into a bare convolution

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise PoseBridgeError("alpha must lie in [0, 1]")


@dataclass
class CueHead:
    w_p: object  # (C_L, d)
    w_d: object  # (d_text, d)
    tau: float = 0.07
    eps: float = 1e-6

    def __post_init__(self):
        if self.tau <= 0 or self.eps <= 0:
            raise PoseBridgeError("tau and eps must be positive")


@dataclass(frozen=True)
class HPEConfig:
    channels: tuple[int, ...] = (16, 16, 16)
    resolutions: tuple[int, ...] = (16, 12, 10)
    joints: int = 17
    cue_dim: int = 64
    text_dim: int = 64
    alpha: float = 0.5
    tau: float = 0.07
    eps: float = 1e-6
    lambda_hpe: float = 0.1
    hr: bool = True
    bp: bool = True
    corpus_frames: int = 1024
    epochs: int = 8
    batch_size: int = 64
    lr: float = 4e-3
    weight_decay: float = 0.0
    warmup_epochs: int = 1


# --- Operations ----------------------------------------------------------------------


def hierarchical_refine(pyramid: FeaturePyramid, params: RefineParams):
    """Inject each refined level into the next one; returns the refined deepest map."""
    levels = pyramid.levels
    if len(params.projections) != len(levels) - 1:
        raise ShapeError("need one projection per level transition")
    refined = levels[0]
    for l in range(len(levels) - 1):
        nxt = levels[l + 1]
        h, w, c = value_of(nxt).shape[-3:]
        proj = params.projections[l]
        if value_of(proj).shape != (value_of(refined).shape[-1], c):
            raise ShapeError(f"projection {l} has shape {value_of(proj).shape}, expected "
                             f"{(value_of(refined).shape[-1], c)}")
        x = ops.matmul(refined, proj)
        if value_of(x).shape[-3:-1] != (h, w):
            x = ops.resize_bilinear(x, size=(h, w))
        x = ops.add(ops.conv3x3(x, params.kernels[l]), params.biases[l])
        if params.activation == "gelu":
            x = ops.gelu(x)
        refined = ops.add(nxt, ops.mul(x, params.alpha))
    return refined


def build_body_attention(joint_probs) -> BodyAttentionMap:
    """Average joint heatmaps (..., J, H, W) and normalise each map to unit mass."""
    hm = np.asarray(joint_probs, dtype=np.float64)
    if hm.ndim < 3:
        raise ShapeError("heatmaps must be (..., J, H, W)")
    if np.any(hm < 0):
        raise PoseBridgeError("heatmaps must be nonnegative")
    a = hm.mean(axis=-3)
    total = a.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0):
        raise DegenerateError("joint heatmaps carry no mass")
    return BodyAttentionMap(a / total)


def uniform_attention(shape: Sequence[int]) -> BodyAttentionMap:
    a = np.ones(tuple(shape))
    return BodyAttentionMap(a / a.sum(axis=(-2, -1), keepdims=True))


def pose_anchored_pool(feature, attention: BodyAttentionMap, head: CueHead):
    """Body-weighted spatial average of ``feature`` projected by ``W_p``."""
    a = attention.weights
    if value_of(feature).shape[-3:-1] != a.shape[-2:]:
        raise ShapeError(f"attention {a.shape[-2:]} vs feature {value_of(feature).shape[-3:-1]}")
    weighted = ops.sum(ops.mul(feature, a[..., None]), axis=(-3, -2))
    pooled = ops.div(weighted, a.sum(axis=(-2, -1))[..., None] + head.eps)
    return ops.matmul(pooled, head.w_p)


def hpe_semantic_loss(cues, texts, tau: float = 0.07):
    """Symmetric InfoNCE between B cue and B text embeddings."""
    b = value_of(cues).shape[0]
    if b == 0:
        raise PoseBridgeError("empty batch")
    p = F.l2_normalize(cues)
    t = F.l2_normalize(texts)
    logits = ops.mul(ops.matmul(p, ops.transpose(t)), 1.0 / tau)
    eye = np.eye(b)
    rows = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), eye))
    cols = ops.sum(ops.mul(ops.log_softmax(logits, axis=0), eye))
    return ops.mul(ops.add(rows, cols), -1.0 / (2 * b))


def surrogate_pose_loss(pred, target):
    if value_of(pred).shape != value_of(target).shape:
        raise ShapeError(f"pose prediction {value_of(pred).shape} vs target {value_of(target).shape}")
    diff = ops.sub(pred, target)
    return ops.mean(ops.mul(diff, diff))


def hpe_total_loss(pose_loss, sem_loss, lambda_hpe: float = 0.1):
    return ops.add(pose_loss, ops.mul(sem_loss, lambda_hpe))


def predict_heatmaps(feature, weight, bias):
    """1x1 pose head: (..., H, W, C) -> (..., J, H, W)."""
    out = ops.add(ops.matmul(feature, weight), bias)
    nd = value_of(out).ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return ops.transpose(out, axes=axes)


# --- Parameterised model ---------------------------------------------------------------


def init_hpe_params(cfg: HPEConfig, seed: int) -> ParameterStore:
    rng = make_rng(seed, "hpe-init")
    store = ParameterStore()
    ch = cfg.channels
    for l in range(len(ch) - 1):
        proj = glorot(rng, ch[l], ch[l + 1]) * 0.1
        if ch[l] == ch[l + 1]:
            proj += np.eye(ch[l])
        store.add(f"hpe/proj{l}", proj)
        kernel = glorot(rng, 9 * ch[l + 1], ch[l + 1], (3, 3, ch[l + 1], ch[l + 1])) * 0.1
        kernel[1, 1] += np.eye(ch[l + 1])
        store.add(f"hpe/refine{l}", kernel)
        store.add(f"hpe/refine{l}_b", np.zeros(ch[l + 1]))
    store.add("hpe/w_p", glorot(rng, ch[-1], cfg.cue_dim))
    w_d = glorot(rng, cfg.text_dim, cfg.cue_dim) * 0.1
    if cfg.text_dim == cfg.cue_dim:
        w_d += np.eye(cfg.cue_dim)
    store.add("hpe/w_d", w_d)
    store.add("hpe/pose_w", glorot(rng, ch[-1], cfg.joints))
    store.add("hpe/pose_b", np.zeros(cfg.joints))
    return store


@dataclass
class HPEModel:
    """Frozen-after-training cue extractor with HR/BP switches."""

    config: HPEConfig
    params: ParameterStore
    log: list = field(default_factory=list)

    def refine_params(self, p: Mapping) -> RefineParams:
        n = len(self.config.channels) - 1
        return RefineParams(
            [p[f"hpe/proj{l}"] for l in range(n)],
            [p[f"hpe/refine{l}"] for l in range(n)],
            [p[f"hpe/refine{l}_b"] for l in range(n)],
            alpha=self.config.alpha,
        )

    def head(self, p: Mapping) -> CueHead:
        return CueHead(p["hpe/w_p"], p["hpe/w_d"], tau=self.config.tau, eps=self.config.eps)

    def deep_feature(self, pyramid: FeaturePyramid, p: Mapping):
        if self.config.hr:
            return hierarchical_refine(pyramid, self.refine_params(p))
        return pyramid.levels[-1]

    def attention(self, heatmaps) -> BodyAttentionMap:
        if self.config.bp:
            return build_body_attention(heatmaps)
        return uniform_attention(np.shape(heatmaps)[:-3] + np.shape(heatmaps)[-2:])

    def frame_cues(self, pyramid: FeaturePyramid, heatmaps, p: Mapping | None = None):
        """Unnormalised cue vectors (N, d) for N frames."""
        p = self.params.arrays if p is None else p
        feat = self.deep_feature(pyramid, p)
        return pose_anchored_pool(feat, self.attention(heatmaps), self.head(p))

    def loss(self, p: Mapping, levels, heatmaps, captions):
        pyramid = FeaturePyramid(list(levels))
        feat = self.deep_feature(pyramid, p)
        cues = pose_anchored_pool(feat, self.attention(heatmaps), self.head(p))
        texts = ops.matmul(captions, p["hpe/w_d"])
        sem = hpe_semantic_loss(cues, texts, self.config.tau)
        pose = surrogate_pose_loss(predict_heatmaps(feat, p["hpe/pose_w"], p["hpe/pose_b"]), heatmaps)
        return hpe_total_loss(pose, sem, self.config.lambda_hpe), pose, sem

    def extract(self, levels, heatmaps) -> np.ndarray:
        """L2-normalised cues for a stack of frames, computed without a tape."""
        cues = self.frame_cues(FeaturePyramid(list(levels)), heatmaps)
        return F.l2_normalize(cues).value


def extract_cue_sequence(frames, model: HPEModel) -> np.ndarray:
    """Per-frame refine, attend and pool; returns (T, d) unit cue vectors."""
    if len(frames) == 0:
        raise PoseBridgeError("empty video")
    return np.concatenate([model.extract(pyr.levels, hm[None] if np.ndim(hm) == 3 else hm)
                           .reshape(-1, model.config.cue_dim) for pyr, hm in frames])


def train_hpe(cfg: HPEConfig, corpus, seed: int) -> HPEModel:
    """Optimise the combined pose + semantic objective on a captioned frame corpus."""
    from .trainer import AdamW, Schedule, clip_gradients, lr_at

    model = HPEModel(cfg, init_hpe_params(cfg, seed))
    n = corpus.captions.shape[0]
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    sched = Schedule(lr=cfg.lr, weight_decay=cfg.weight_decay, warmup_epochs=cfg.warmup_epochs,
                     epochs=cfg.epochs, min_lr=cfg.lr * 1e-3, batch_size=cfg.batch_size)
    opt = AdamW(model.params)
    rng = make_rng(seed, "hpe-shuffle")
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        totals = []
        for s in range(steps_per_epoch):
            idx = np.sort(order[s * cfg.batch_size:(s + 1) * cfg.batch_size])
            if len(idx) < 2:
                continue
            with Tape() as tape:
                p = model.params.watch(tape)
                total, pose, sem = model.loss(
                    p, [lv[idx] for lv in corpus.levels], corpus.heatmaps[idx], corpus.captions[idx]
                )
                grads = tape.gradient(total, list(p.values()))
            grads = clip_gradients(dict(zip(p, grads)), 1.0)
            step += 1
            opt.step(grads, lr_at(step, sched, steps_per_epoch), sched.weight_decay)
            totals.append((total.item(), pose.item(), sem.item()))
        t = np.mean(totals, axis=0)
        model.log.append({"epoch": epoch + 1, "loss": t[0], "pose": t[1], "sem": t[2]})
    return model
