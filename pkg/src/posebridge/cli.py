"""``posebridge`` command line: synth, train, eval, gradcheck and ablate.

Exit codes: 0 success, 1 contract or validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import checkpoint, config as config_mod
from .bundle import from_arrays, to_arrays
from .datasets import load_dataset, save_dataset
from .errors import ContractViolation, PoseBridgeError
from .evaluation import evaluate
from .gradsuite import run_suite
from .model import embed
from .pipeline import (ablation, adapted_table, build_split, build_world, choose_kappa,
                       extract_features, feature_key, fit, prepare, straddling_accuracy, toggles_from_config)
from .synth import Split

CHECKPOINT_FILE = "checkpoint.pbck"
TRAIN_LOG_FILE = "train_log.jsonl"
CUES_FILE = "cues.pbck"
METRICS_FILE = "metrics.json"
ABLATION_FILE = "ablation.csv"
GRADCHECK_FILE = "gradcheck.txt"


def _config(args):
    return config_mod.load(args.config)


def _seed(args, cfg) -> int:
    return cfg["run.seed"] if args.seed is None else args.seed


def split_id(split: Split) -> str:
    return f"w{split.world.seed}-s{split.seed}-u" + ".".join(str(c) for c in split.unseen_ids)


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> dict:
    cfg = _config(args)
    seed = _seed(args, cfg)
    split = build_split(build_world(cfg, seed), cfg, seed)
    paths = save_dataset(args.out, split)
    print(f"wrote {paths['world']} and {paths['data']} "
          f"({len(split.train)} train, {len(split.val)} val, {len(split.test)} test videos)")
    return paths


def cmd_train(args) -> dict:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _, split = load_dataset(args.data)
    t = toggles_from_config(cfg)
    prep = prepare(cfg, seed, [t], split)
    result = fit(prep, t)
    with split.log.during("adapt"):
        table = adapted_table(cfg, prep.table, result.centroids, t.pa)
        kappa = choose_kappa(cfg, result, prep.table, prep.val[feature_key(cfg, t)], t.pa, seed)
    os.makedirs(args.out, exist_ok=True)
    ck = os.path.join(args.out, CHECKPOINT_FILE)
    checkpoint.save(ck, to_arrays(seed, t, result, table, prep.models, kappa))
    log_path = os.path.join(args.out, TRAIN_LOG_FILE)
    with open(log_path, "w", encoding="utf-8") as fh:
        for row in result.log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    cues = {}
    key = feature_key(cfg, t)
    for store, feats in ((split.train, prep.train[key]), (split.val, prep.val[key])):
        if feats.cues is not None:
            for vid, c in zip(store.video_ids, feats.cues):
                cues[f"cues/{vid}"] = c
    checkpoint.save(os.path.join(args.out, CUES_FILE), cues)
    first, last = result.log[0]["loss_total"], result.log[-1]["loss_total"]
    print(f"trained {len(result.log) - 1} epochs, loss {first:.4f} -> {last:.4f}; wrote {ck}")
    return {"checkpoint": ck, "log": log_path}


def cmd_eval(args) -> dict:
    cfg = _config(args)
    world, split = load_dataset(args.data)
    run = from_arrays(checkpoint.load(args.checkpoint), cfg, world)
    if run.table.seen != split.seen_ids or run.table.unseen != split.unseen_ids:
        raise ContractViolation("checkpoint was trained on a different seen/unseen split")
    key = feature_key(cfg, run.toggles)
    with split.log.during("evaluate"):
        test = extract_features(split.test, world, run.models, cfg, with_cues=run.toggles.uses_cues)[key]
    weights = run.ema if cfg["train.eval_weights"] == "ema" else run.raw
    e = embed(weights, run.model_config, test.skeletons, test.cues)
    z = e["z_b"] if run.model_config.sb else e["z_s"]
    m = evaluate(z, test.labels, run.table, run.kappa)
    out = m.to_json(seed=run.seed, split_id=split_id(split))
    out["toggles"] = run.toggles.row()
    out["straddling_gzsl"] = straddling_accuracy(m, test, split.straddling_unseen)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, METRICS_FILE)
    _write_json(path, out)
    print(f"ZSL {m.zsl_acc:.4f}  S {m.S:.4f}  U {m.U:.4f}  H {m.H:.4f}  (kappa {m.kappa:g}); wrote {path}")
    return out


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    report = run_suite(seed=_seed(args, cfg))
    text = report.summary()
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, GRADCHECK_FILE), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0 if report.passed else 1


def cmd_ablate(args) -> list[dict]:
    cfg = _config(args)
    seed = _seed(args, cfg)
    split = load_dataset(args.data)[1] if args.data else None
    rows = []
    for r in ablation(cfg, seed, split=split):
        rows.append({**r.toggles.row(), "zsl": r.metrics.zsl_acc, "gzsl_h": r.metrics.H})
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, ABLATION_FILE)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["hr", "bp", "sb", "pa", "zsl", "gzsl_h"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "zsl": f"{row['zsl']:.6f}", "gzsl_h": f"{row['gzsl_h']:.6f}"})
    for row in rows:
        print(f"hr={row['hr']} bp={row['bp']} sb={row['sb']} pa={row['pa']}  "
              f"ZSL {row['zsl']:.4f}  H {row['gzsl_h']:.4f}")
    print(f"wrote {path}")
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posebridge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="key = value config file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", default=out_default, help="output directory")
        return p

    common(sub.add_parser("synth", help="generate the synthetic world and splits"), "data")
    p = common(sub.add_parser("train", help="train on the seen classes of a dataset"), "run")
    p.add_argument("--data", required=True, help="directory written by 'synth'")
    p = common(sub.add_parser("eval", help="ZSL/GZSL metrics of a checkpoint"), "run")
    p.add_argument("--data", required=True, help="directory written by 'synth'")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    common(sub.add_parser("gradcheck", help="finite-difference suite"), None)
    p = common(sub.add_parser("ablate", help="the 16-row HR/BP/SB/PA grid"), "ablation")
    p.add_argument("--data", help="directory written by 'synth' (generated from --seed when omitted)")
    return parser


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
             "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = _COMMANDS[args.command](args)
    except PoseBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return out if isinstance(out, int) else 0


if __name__ == "__main__":
    sys.exit(main())
