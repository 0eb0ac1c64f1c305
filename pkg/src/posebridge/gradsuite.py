"""Finite-difference checks of every loss and module forward on micro-sized inputs.

Each check draws ``points`` independent seeded inputs; forward maps are
reduced to a scalar by a fixed random projection of their output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hpe, model, objectives, prototypes
from .hpe import CueHead, FeaturePyramid, HPEConfig, HPEModel, RefineParams
from .model import ModelConfig
from .numerics import GradCheckReport, grad_check, ops
from .numerics import functional as F
from .rng import make_rng

MICRO_MODEL = ModelConfig(joints=3, joint_embed=2, skel_feat=4, cue_dim=4, embed_dim=4, heads=2,
                          ffn_mult=2, dropout=0.0, n_cues=3, n_seen=3)
MICRO_HPE = HPEConfig(channels=(2, 2, 3), resolutions=(4, 3, 3), joints=2, cue_dim=3, text_dim=3)


@dataclass
class CheckResult:
    name: str
    point: int
    report: GradCheckReport


@dataclass
class SuiteReport:
    results: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.report.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.report.max_error for r in self.results), default=0.0)

    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.report.max_error)

    def names(self) -> list[str]:
        return sorted({r.name for r in self.results})

    def summary(self) -> str:
        lines = []
        for name in self.names():
            rs = [r for r in self.results if r.name == name]
            ok = all(r.report.passed for r in rs)
            err = max(r.report.max_error for r in rs)
            lines.append(f"{'PASS' if ok else 'FAIL'} {name:<22} points={len(rs)} max_rel_err={err:.3e}")
        w = self.worst()
        lines.append(f"worst: {w.name} point {w.point}")
        lines.append(w.report.summary())
        lines.append(f"{'PASS' if self.passed else 'FAIL'} total checks={len(self.results)} "
                     f"time={self.seconds:.1f}s")
        return "\n".join(lines)


def _unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _projected(out, r):
    return ops.sum(ops.mul(out, r))


# --- check builders: each returns (scalar_fn, params) for one seeded point ---------------


def _infonce(rng):
    params = {"cues": rng.standard_normal((3, 4)), "texts": rng.standard_normal((3, 4))}
    return lambda p: hpe.hpe_semantic_loss(p["cues"], p["texts"], 0.5), params


def _hpe_total(rng):
    cfg = MICRO_HPE
    store = hpe.init_hpe_params(cfg, int(rng.integers(1 << 30)))
    for k in store:
        store[k][...] += 0.1 * rng.standard_normal(store[k].shape)
    levels = [rng.standard_normal((2, r, r, c)) for r, c in zip(cfg.resolutions, cfg.channels)]
    heat = rng.random((2, cfg.joints, cfg.resolutions[-1], cfg.resolutions[-1])) + 0.05
    caps = rng.standard_normal((2, cfg.text_dim))
    m = HPEModel(cfg, store)
    return (lambda p: m.loss(p, levels, heat, caps)[0]), dict(store.items())


def _refine(rng):
    cfg = MICRO_HPE
    ch, res = cfg.channels, cfg.resolutions
    params = {f"level{l}": rng.standard_normal((res[l], res[l], ch[l])) for l in range(len(ch))}
    for l in range(len(ch) - 1):
        params[f"proj{l}"] = rng.standard_normal((ch[l], ch[l + 1])) * 0.5
        params[f"kernel{l}"] = rng.standard_normal((3, 3, ch[l + 1], ch[l + 1])) * 0.3
        params[f"bias{l}"] = rng.standard_normal(ch[l + 1]) * 0.1
    r = rng.standard_normal((res[-1], res[-1], ch[-1]))
    n = len(ch) - 1

    def fn(p):
        pyr = FeaturePyramid([p[f"level{l}"] for l in range(n + 1)])
        rp = RefineParams([p[f"proj{l}"] for l in range(n)], [p[f"kernel{l}"] for l in range(n)],
                          [p[f"bias{l}"] for l in range(n)])
        return _projected(hpe.hierarchical_refine(pyr, rp), r)

    return fn, params


def _pool(rng):
    heat = rng.random((2, 3, 3, 3)) + 0.01
    att = hpe.build_body_attention(heat)
    params = {"feature": rng.standard_normal((2, 3, 3, 4)), "w_p": rng.standard_normal((4, 3))}
    r = rng.standard_normal((2, 3))
    w_d = np.eye(3)  # only used by the text side

    def fn(p):
        return _projected(hpe.pose_anchored_pool(p["feature"], att, CueHead(p["w_p"], w_d)), r)

    return fn, params


def _micro_model_params(rng) -> dict[str, np.ndarray]:
    store = model.init_model_params(MICRO_MODEL, int(rng.integers(1 << 30)))
    for k in store:
        store[k][...] += 0.2 * rng.standard_normal(store[k].shape)
    return dict(store.items())


def _encoder(rng):
    cfg = MICRO_MODEL
    p0 = {k: v for k, v in _micro_model_params(rng).items() if k.startswith(("enc/", "proj_s/"))}
    p0["skeleton"] = rng.standard_normal((2, 4, cfg.joints, 2))
    r = rng.standard_normal((2, cfg.embed_dim))
    return (lambda p: _projected(model.encode_skeleton(p["skeleton"], p), r)), p0


def _bridge(rng):
    cfg = MICRO_MODEL
    p0 = {k: v for k, v in _micro_model_params(rng).items() if k.startswith("bridge/")}
    p0["z_s"] = _unit_rows(rng, 2, cfg.embed_dim)
    p0["cues"] = rng.standard_normal((2, cfg.n_cues, cfg.cue_dim))
    r = rng.standard_normal((2, cfg.embed_dim))
    return (lambda p: _projected(model.bridge_forward(p["z_s"], p["cues"], p, cfg.heads), r)), p0


def _temporal_pool(rng):
    cfg = MICRO_MODEL
    p0 = {k: v for k, v in _micro_model_params(rng).items() if k.startswith(("pool/", "adapter/"))}
    p0["cues"] = rng.standard_normal((2, cfg.n_cues, cfg.cue_dim))
    r = rng.standard_normal((2, cfg.embed_dim))
    return (lambda p: _projected(model.temporal_pool(p["cues"], p), r)), p0


def _adapt_seen(rng):
    params = {"t": _unit_rows(rng, 4), "mu": _unit_rows(rng, 4)}
    r = rng.standard_normal(4)
    return (lambda p: _projected(prototypes.adapt_seen(p["t"], p["mu"], 0.3), r)), params


def _displace(rng):
    params = {"t": _unit_rows(rng, 4), "protos": _unit_rows(rng, 3, 4), "mus": _unit_rows(rng, 3, 4)}
    r = rng.standard_normal(4)
    return (lambda p: _projected(prototypes.displace(p["t"], p["protos"], p["mus"], 0.3, 0.5), r)), params


def _embedding_batch(rng, b=4, d=4, c=3):
    y = np.array([0, 0, 1, 2])[:b]
    return y, {"z": _unit_rows(rng, b, d), "protos": _unit_rows(rng, c, d)}


def _cls(rng):
    y, params = _embedding_batch(rng)
    params.pop("protos")
    params["w"] = rng.standard_normal((4, 3))
    params["b"] = rng.standard_normal(3)
    return (lambda p: objectives.cls_loss(p["z"], y, p["w"], p["b"])), params


def _sem(rng):
    y, params = _embedding_batch(rng)
    return (lambda p: objectives.sem_loss(p["z"], y, p["protos"])), params


def _supcon(rng):
    y, params = _embedding_batch(rng)
    params.pop("protos")
    return (lambda p: objectives.supcon_loss(F.l2_normalize(p["z"]), y, 0.5)), params


def _align(rng):
    # z_p stays a constant: the teacher side is gradient-stopped, so only z_s and T are checked
    _, params = _embedding_batch(rng)
    z_p = _unit_rows(rng, 4, 4)
    return (lambda p: objectives.align_loss(p["z"], z_p, p["protos"], 0.3, 1.0, 4.0)), params


def _total(rng):
    cfg = MICRO_MODEL
    p0 = _micro_model_params(rng)
    skel = rng.standard_normal((4, 3, cfg.joints, 2))
    cues = rng.standard_normal((4, cfg.n_cues, cfg.cue_dim))
    y = np.array([0, 0, 1, 2])
    protos = _unit_rows(rng, cfg.n_seen, cfg.embed_dim)
    # kd is off here: with the teacher gradient-stopped, finite differences through z_p
    # would legitimately disagree with the tape; the KL term is covered by loss/align
    w = objectives.LossWeights(tau_supcon=0.5, kd=0.0)

    def fn(p):
        emb = model.forward(p, cfg, skel, cues)
        return objectives.total_loss(emb, y, protos, w, p)[0]

    return fn, p0


CHECKS: dict[str, Callable] = {
    "loss/infonce": _infonce,
    "loss/hpe_total": _hpe_total,
    "loss/cls": _cls,
    "loss/sem": _sem,
    "loss/supcon": _supcon,
    "loss/align": _align,
    "loss/total": _total,
    "fwd/refine": _refine,
    "fwd/pose_pool": _pool,
    "fwd/bridge": _bridge,
    "fwd/adapt_seen": _adapt_seen,
    "fwd/adapt_unseen": _displace,
    "fwd/temporal_pool": _temporal_pool,
    "fwd/encoder": _encoder,
}


# entries probed per tensor at each point (seeded choice); the whole-model loss is the costly one
MAX_ENTRIES = {"loss/total": 2}
DEFAULT_ENTRIES = 8


def run_suite(seed: int = 0, points: int = 10, rtol: float = 1e-4, step: float = 1e-5,
              names=None, max_entries: int | None = DEFAULT_ENTRIES) -> SuiteReport:
    """``max_entries=None`` probes every entry of every tensor."""
    start = time.perf_counter()
    results = []
    for name in names or CHECKS:
        cap = None if max_entries is None else min(max_entries, MAX_ENTRIES.get(name, max_entries))
        for i in range(points):
            fn, params = CHECKS[name](make_rng(seed, "gradcheck", name, i))
            report = grad_check(fn, params, step=step, rtol=rtol, max_entries=cap, seed=i)
            results.append(CheckResult(name, i, report))
    return SuiteReport(results, time.perf_counter() - start)

