"""Flat ``section.key = value`` configuration with typed defaults.

Every accepted key has a default below; anything else is rejected by name.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    # synthetic world and split
    "synth.classes": 20,
    "synth.groups": 4,
    "synth.unseen": 4,
    "synth.train_per_class": 50,
    "synth.val_per_class": 10,
    "synth.test_per_class": 20,
    "synth.frames": 32,
    "synth.joints": 17,
    "synth.motion_dim": 16,
    "synth.cue_dim": 64,
    "synth.sigma_s": 0.05,
    "synth.sigma_p": 0.1,
    # pose-estimation stage
    "hpe.mode": "learned",
    "hpe.hr": True,
    "hpe.bp": True,
    "hpe.alpha": 0.5,
    "hpe.tau": 0.07,
    "hpe.eps": 1e-6,
    "hpe.lambda_sem": 0.1,
    "hpe.corpus_frames": 1024,
    "hpe.epochs": 8,
    "hpe.batch_size": 64,
    "hpe.lr": 4e-3,
    # recognition model
    "model.joint_embed": 8,
    "model.skel_feat": 32,
    "model.embed_dim": 64,
    "model.n_cues": 16,
    "bridge.sb": True,
    "bridge.heads": 4,
    "bridge.ffn_mult": 2,
    "bridge.dropout": 0.1,
    # losses
    "loss.s_cls": 1.0,
    "loss.s_sem": 1.5,
    "loss.s_con": 1.5,
    "loss.p_cls": 0.5,
    "loss.p_sem": 0.5,
    "loss.p_con": 0.3,
    "loss.s2p": 0.3,
    "loss.kd": 1.0,
    "loss.b_sem": 1.0,
    "loss.b_con": 0.5,
    "loss.tau_supcon": 0.07,
    "loss.tau_d": 4.0,
    # optimisation
    "train.lr": 1e-3,
    "train.weight_decay": 2e-3,
    "train.warmup_epochs": 5,
    "train.epochs": 30,
    "train.min_lr": 1e-6,
    "train.batch_size": 32,
    "train.ema_decay": 0.95,
    "train.ema_start_epoch": 5,
    "train.clip_norm": 1.0,
    "train.eval_weights": "ema",
    # prototype adaptation
    "proto.pa": True,
    "proto.rho": 0.2,
    "proto.k": 5,
    "proto.tau_a": 0.07,
    # evaluation
    "eval.kappa": 0.1,
    "eval.sweep": False,
    "eval.kappa_grid": (0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2, 0.25, 0.3),
    "eval.pseudo_unseen": 4,
    # run
    "run.seed": 0,
}

_CHOICES = {"hpe.mode": ("learned", "direct"), "train.eval_weights": ("ema", "raw")}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if isinstance(raw, str):
                return tuple(float(x) for x in raw.split(",") if x.strip())
            return tuple(float(x) for x in raw)
        value = str(raw).strip()
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ValueError(value)
        return value
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


@dataclass
class Config:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def override(self, updates: Mapping[str, Any]) -> "Config":
        out = dict(self.values)
        for k, v in updates.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            out[k] = _coerce(k, v)
        return Config(out)

    def section(self, name: str) -> dict[str, Any]:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def dumps(self) -> str:
        lines = []
        for k, v in self.values.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse(text: str) -> Config:
    updates: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in updates:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        updates[key] = value
    return Config().override(updates)


def load(path: str | os.PathLike | None) -> Config:
    if path is None:
        return Config()
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def keys() -> Iterable[str]:
    return DEFAULTS.keys()
