"""Flattening a trained run into named arrays and back.

Checkpoint namespaces: ``meta/*`` (toggles, seed, split ids), ``raw/*`` and
``ema/*`` (recognition weights), ``hpe/*`` (pose stage), ``centroid/<id>``,
``text/<id>`` (raw prototypes) and ``proto/<id>`` (prototypes used at test time).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import CheckpointError, ContractViolation, PoseBridgeError
from .hpe import HPEModel, init_hpe_params
from .model import ModelConfig, init_model_params
from .pipeline import Toggles, hpe_config, model_config
from .prototypes import CentroidTable, PrototypeTable
from .synth import World
from .trainer import TrainResult


def to_arrays(seed: int, toggles: Toggles, result: TrainResult, table: PrototypeTable,
              models: dict, kappa: float) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {
        "meta/toggles": np.array([toggles.hr, toggles.bp, toggles.sb, toggles.pa], dtype=np.float64),
        "meta/seed": np.array(float(seed)),
        "meta/seen": np.array(table.seen, dtype=np.float64),
        "meta/unseen": np.array(table.unseen, dtype=np.float64),
        "meta/kappa": np.array(float(kappa)),
    }
    for k, v in result.params.items():
        out[f"raw/{k}"] = v
    for k, v in result.ema.items():
        out[f"ema/{k}"] = v
    model = models.get(toggles.hpe_key) if toggles.uses_cues else None
    if model is not None:
        for k, v in model.params.items():
            out[k] = v
    if result.centroids is not None:
        for c in table.seen:
            out[f"centroid/{c}"] = result.centroids.centroids[c]
        out["meta/centroid_counts"] = np.array([result.centroids.counts[c] for c in table.seen], dtype=np.float64)
    for c in table.seen + table.unseen:
        out[f"text/{c}"] = table.vectors[c]
    for c in sorted(table.adapted):
        out[f"proto/{c}"] = table.adapted[c]
    return out


@dataclass
class LoadedRun:
    seed: int
    toggles: Toggles
    model_config: ModelConfig
    raw: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    models: dict
    centroids: CentroidTable | None
    table: PrototypeTable  # with adapted prototypes
    kappa: float

    def weights(self, which: str) -> dict[str, np.ndarray]:
        return self.ema if which == "ema" else self.raw


def _get(arrays, key):
    if key not in arrays:
        raise ContractViolation(f"checkpoint misses tensor {key!r}")
    return arrays[key]


def _load(store, arrays, prefix: str = ""):
    try:
        store.load(arrays, prefix=prefix)
    except KeyError as exc:
        raise ContractViolation(f"incompatible checkpoint: {exc.args[0]}") from None
    return store


def _ids(arr) -> list[int]:
    return [int(round(x)) for x in np.ravel(arr)]


def from_arrays(arrays: dict[str, np.ndarray], cfg: Config, world: World) -> LoadedRun:
    """Rebuild a run; shapes are checked against the configuration and named on mismatch."""
    bits = [bool(round(x)) for x in _get(arrays, "meta/toggles")]
    if len(bits) != 4:
        raise CheckpointError("meta/toggles must hold four switches")
    t = Toggles(*bits)
    seen, unseen = _ids(_get(arrays, "meta/seen")), _ids(_get(arrays, "meta/unseen"))
    mcfg = model_config(cfg, world, len(seen), t)
    raw = _load(init_model_params(mcfg, 0), arrays, "raw/")
    ema = _load(init_model_params(mcfg, 0), arrays, "ema/")
    models = {}
    if t.uses_cues and cfg["hpe.mode"] == "learned":
        hcfg = hpe_config(cfg, world, t.hr, t.bp)
        models[t.hpe_key] = HPEModel(hcfg, _load(init_hpe_params(hcfg, 0), arrays))
    centroids = None
    if mcfg.use_cues:
        counts = _ids(_get(arrays, "meta/centroid_counts"))
        centroids = CentroidTable({c: _get(arrays, f"centroid/{c}") for c in seen}, dict(zip(seen, counts)))
    vectors = {c: _get(arrays, f"text/{c}") for c in seen + unseen}
    adapted = {c: _get(arrays, f"proto/{c}") for c in seen + unseen}
    try:
        table = PrototypeTable(vectors, seen, unseen, adapted)
    except PoseBridgeError as exc:
        raise CheckpointError(f"invalid prototype table in checkpoint: {exc}") from None
    seed = int(round(float(_get(arrays, "meta/seed"))))
    kappa = float(_get(arrays, "meta/kappa"))
    return LoadedRun(seed, t, mcfg, raw.arrays, ema.arrays, models, centroids, table, kappa)
