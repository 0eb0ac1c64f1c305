"""Persisting a generated world and split: ``world.json`` plus a PBCK data container."""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from . import checkpoint
from .errors import CheckpointError, PoseBridgeError
from .synth import AccessLog, SampleStore, Split, Video, World, WorldConfig, make_world

WORLD_FILE = "world.json"
DATA_FILE = "data.pbck"
_FIELDS = ("skeleton", "cues", "caption", "background")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def save_dataset(out_dir: str, split: Split) -> dict[str, str]:
    """Write the manifest and every video payload; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for store in (split.train, split.val, split.test):
        for v in store:
            for f in _FIELDS:
                arrays[f"data/{v.video_id}/{f}"] = getattr(v, f)
    manifest = _jsonable(split.manifest())
    wpath = os.path.join(out_dir, WORLD_FILE)
    dpath = os.path.join(out_dir, DATA_FILE)
    with open(wpath, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    checkpoint.save(dpath, arrays)
    return {"world": wpath, "data": dpath}


def _world_from_manifest(m: dict) -> World:
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in m["config"].items()}
    wc = WorldConfig(**cfg)
    return make_world(wc.classes, wc.groups, m["world_seed"], wc)


def load_dataset(data_dir: str) -> tuple[World, Split]:
    """Rebuild world and split from disk; the regenerated world must match the manifest."""
    wpath = os.path.join(data_dir, WORLD_FILE)
    dpath = os.path.join(data_dir, DATA_FILE)
    if not os.path.exists(wpath) or not os.path.exists(dpath):
        raise FileNotFoundError(f"no dataset at {data_dir!r} (need {WORLD_FILE} and {DATA_FILE})")
    with open(wpath, encoding="utf-8") as fh:
        m = json.load(fh)
    world = _world_from_manifest(m)
    groups = {str(g): mem for g, mem in world.groups().items()}
    if groups != m["groups"]:
        raise PoseBridgeError("world.json groups do not match the regenerated world")
    arrays = checkpoint.load(dpath)
    stores: dict[str, list[Video]] = {"train": [], "val": [], "test": []}
    ids = sorted({k[len("data/"):k.rindex("/")] for k in arrays if k.startswith("data/")},
                 key=lambda s: (s.split("/")[0], int(s.split("/")[1]), int(s.split("/")[2])))
    for vid in ids:
        name, cls, _ = vid.split("/")
        if name not in stores:
            raise CheckpointError(f"unknown split {name!r} in data container")
        try:
            payload = {f: arrays[f"data/{vid}/{f}"] for f in _FIELDS}
        except KeyError as exc:
            raise CheckpointError(f"data container misses {exc.args[0]}") from None
        stores[name].append(Video(vid, int(cls), **payload))
    log = AccessLog()
    split = Split(world, m["seed"], list(m["seen"]), list(m["unseen"]),
                  SampleStore("train", stores["train"], log), SampleStore("val", stores["val"], log),
                  SampleStore("test", stores["test"], log), log)
    expected = {"train": len(split.train), "val": len(split.val), "test": len(split.test)}
    if expected != m["counts"]:
        raise PoseBridgeError(f"data container sample counts {expected} differ from manifest {m['counts']}")
    return world, split


def world_config_dict(world: World) -> dict:
    return _jsonable(asdict(world.config))
