"""Skeleton encoder, skeleton-conditioned semantic bridge and cue temporal pooling.

Batched shapes: skeletons ``(B, T, J, 2)``, cue sequences ``(B, n, d_cue)``,
embeddings ``(B, D)``. Every function takes a parameter mapping whose values
may be arrays or watched tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .errors import PoseBridgeError, ShapeError
from .numerics import Tensor, ops, value_of
from .numerics import functional as F
from .params import ParameterStore, glorot
from .rng import make_rng
from .synth import skeleton_adjacency


@dataclass(frozen=True)
class ModelConfig:
    joints: int = 17
    joint_embed: int = 8
    skel_feat: int = 32
    cue_dim: int = 64
    embed_dim: int = 64
    heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.1
    n_cues: int = 16
    n_seen: int = 16
    sb: bool = True  # semantic bridge on; off means z_s is the matching embedding
    use_cues: bool = True  # cue branch (z_p, alignment) trained at all

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise PoseBridgeError("embed_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise PoseBridgeError("dropout must lie in [0, 1)")
        if self.sb and not self.use_cues:
            raise PoseBridgeError("the bridge needs the cue branch")


class EmbeddingTriple(NamedTuple):
    z_s: Tensor
    z_p: Tensor | None
    z_b: Tensor | None

    def matching(self) -> Tensor:
        """Embedding compared against prototypes at inference."""
        return self.z_b if self.z_b is not None else self.z_s


def init_model_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    rng = make_rng(seed, "model-init")
    s = ParameterStore()
    J, Fe, D, dc = cfg.joints, cfg.joint_embed, cfg.embed_dim, cfg.cue_dim
    s.add("enc/embed_w", glorot(rng, 2, Fe))
    s.add("enc/embed_b", np.zeros(Fe))
    s.add("enc/fc1_w", glorot(rng, J * Fe, cfg.skel_feat))
    s.add("enc/fc1_b", np.zeros(cfg.skel_feat))
    s.add("enc/fc2_w", glorot(rng, cfg.skel_feat, cfg.skel_feat))
    s.add("enc/fc2_b", np.zeros(cfg.skel_feat))
    s.add("proj_s/w1", glorot(rng, cfg.skel_feat, D))
    s.add("proj_s/b1", np.zeros(D))
    s.add("proj_s/w2", glorot(rng, D, D))
    s.add("proj_s/b2", np.zeros(D))
    s.add("cls_s/w", glorot(rng, D, cfg.n_seen))
    s.add("cls_s/b", np.zeros(cfg.n_seen))
    if cfg.use_cues:
        s.add("pool/query", rng.standard_normal(dc) / math.sqrt(dc))
        s.add("pool/w_a", glorot(rng, dc, dc))
        s.add("adapter/w", glorot(rng, dc, D))
        s.add("adapter/b", np.zeros(D))
        s.add("cls_p/w", glorot(rng, D, cfg.n_seen))
        s.add("cls_p/b", np.zeros(cfg.n_seen))
    if cfg.sb:
        s.add("bridge/w_b", glorot(rng, dc, D))
        for name in ("w_q", "w_k", "w_v", "w_o"):
            s.add(f"bridge/{name}", glorot(rng, D, D))
        s.add("bridge/gamma", np.zeros(D))
        s.add("bridge/ln1_g", np.ones(D))
        s.add("bridge/ln1_b", np.zeros(D))
        s.add("bridge/ffn_w1", glorot(rng, D, cfg.ffn_mult * D))
        s.add("bridge/ffn_b1", np.zeros(cfg.ffn_mult * D))
        s.add("bridge/ffn_w2", glorot(rng, cfg.ffn_mult * D, D))
        s.add("bridge/ffn_b2", np.zeros(D))
        s.add("bridge/ln2_g", np.ones(D))
        s.add("bridge/ln2_b", np.zeros(D))
    return s


def encode_skeleton(skeleton, p: Mapping, adjacency: np.ndarray | None = None):
    """Stand-in graph encoder followed by the two-layer projector ``W_s``."""
    s = value_of(skeleton) if not isinstance(skeleton, Tensor) else skeleton
    if s.ndim != 4 or s.shape[-1] != 2:
        raise ShapeError(f"skeleton batch must be (B, T, J, 2), got {s.shape}")
    b, t, j, _ = s.shape
    if t == 0:
        raise PoseBridgeError("skeleton sequence has no frames")
    a = skeleton_adjacency(j) if adjacency is None else adjacency
    h = F.linear(s, p["enc/embed_w"], p["enc/embed_b"])  # (B, T, J, F)
    h = ops.matmul(a, h)  # neighbour aggregation
    h = ops.mean(h, axis=1)  # temporal mean, (B, J, F)
    h = ops.reshape(h, shape=(b, -1))
    h = F.mlp(h, [(p["enc/fc1_w"], p["enc/fc1_b"]), (p["enc/fc2_w"], p["enc/fc2_b"])])
    z = F.mlp(h, [(p["proj_s/w1"], p["proj_s/b1"]), (p["proj_s/w2"], p["proj_s/b2"])])
    return F.l2_normalize(z)


def bridge_forward(z_s, cues, p: Mapping, heads: int = 4, dropout_mask=None, return_weights: bool = False):
    """Gated cross-attention from ``z_s`` into the cue sequence, then a residual FFN.

    ``dropout_mask`` (B, hidden), already scaled by 1/keep, multiplies the FFN
    hidden activations during training.
    """
    c = value_of(cues)
    if c.ndim != 3:
        raise ShapeError(f"cue batch must be (B, n, d), got {c.shape}")
    if c.shape[1] == 0:
        raise PoseBridgeError("empty cue sequence")
    b, d = value_of(z_s).shape
    kv = ops.matmul(cues, p["bridge/w_b"])
    q = ops.matmul(ops.reshape(z_s, shape=(b, 1, d)), p["bridge/w_q"])
    k = ops.matmul(kv, p["bridge/w_k"])
    v = ops.matmul(kv, p["bridge/w_v"])
    attn, weights = F.scaled_dot_attention(q, k, v, heads, w_out=p["bridge/w_o"], return_weights=True)
    attn = ops.reshape(attn, shape=(b, d))
    gate = ops.sigmoid(p["bridge/gamma"])
    h = F.layer_norm(ops.add(z_s, ops.mul(gate, attn)), p["bridge/ln1_g"], p["bridge/ln1_b"])
    f = F.mlp(h, [(p["bridge/ffn_w1"], p["bridge/ffn_b1"]), (p["bridge/ffn_w2"], p["bridge/ffn_b2"])],
              dropout_masks=[dropout_mask, None])
    z_b = F.l2_normalize(F.layer_norm(ops.add(h, f), p["bridge/ln2_g"], p["bridge/ln2_b"]))
    return (z_b, weights) if return_weights else z_b


def temporal_pool(cues, p: Mapping, return_weights: bool = False):
    """Learned-query attention over time, then the one-layer pose adapter."""
    c = value_of(cues)
    if c.ndim != 3:
        raise ShapeError(f"cue batch must be (B, n, d), got {c.shape}")
    if c.shape[1] == 0:
        raise PoseBridgeError("empty cue sequence")
    d = c.shape[-1]
    keys = ops.matmul(cues, p["pool/w_a"])  # (B, n, d)
    scores = ops.mul(ops.matmul(keys, p["pool/query"]), 1.0 / math.sqrt(d))  # (B, n)
    w = ops.softmax(scores, axis=-1)
    pooled = ops.sum(ops.mul(cues, ops.reshape(w, shape=value_of(w).shape + (1,))), axis=1)
    z_p = F.l2_normalize(F.linear(pooled, p["adapter/w"], p["adapter/b"]))
    return (z_p, w) if return_weights else z_p


def sample_indices(t: int, n: int = 16) -> np.ndarray:
    if t < 1:
        raise PoseBridgeError("cannot sample from an empty sequence")
    return np.floor(np.linspace(0.0, t - 1, n) + 0.5).astype(int)


def sample_cues(cues: np.ndarray, n: int = 16) -> np.ndarray:
    """Evenly spaced, rounded frame selection along the first axis."""
    cues = np.asarray(cues)
    return cues[sample_indices(cues.shape[0], n)]


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def forward(p: Mapping, cfg: ModelConfig, skeletons, cues=None, rng: np.random.Generator | None = None) -> EmbeddingTriple:
    """All three embeddings for a batch; ``rng`` enables training-mode dropout."""
    z_s = encode_skeleton(skeletons, p)
    z_p = z_b = None
    if cfg.use_cues:
        if cues is None:
            raise PoseBridgeError("model needs cue sequences")
        z_p = temporal_pool(cues, p)
    if cfg.sb:
        mask = None
        if rng is not None:
            mask = dropout_mask(rng, (value_of(z_s).shape[0], cfg.ffn_mult * cfg.embed_dim), cfg.dropout)
        z_b = bridge_forward(z_s, cues, p, cfg.heads, dropout_mask=mask)
    return EmbeddingTriple(z_s, z_p, z_b)


def embed(params: Mapping[str, np.ndarray], cfg: ModelConfig, skeletons, cues=None,
          batch_size: int = 256) -> dict[str, np.ndarray]:
    """Inference-mode embeddings as arrays, computed in fixed-size chunks."""
    n = len(skeletons)
    out: dict[str, list] = {"z_s": [], "z_p": [], "z_b": []}
    for lo in range(0, n, batch_size):
        sl = slice(lo, lo + batch_size)
        e = forward(params, cfg, skeletons[sl], None if cues is None else cues[sl])
        for k, v in zip(("z_s", "z_p", "z_b"), e):
            if v is not None:
                out[k].append(v.value)
    return {k: np.concatenate(v) for k, v in out.items() if v}
