import csv
import functools
import json

import numpy as np
import pytest

from posebridge import checkpoint, cli, config
from posebridge.bundle import from_arrays
from posebridge.datasets import load_dataset
from posebridge.evaluation import evaluate
from posebridge.model import embed, init_model_params
from posebridge.numerics import ops
from posebridge.pipeline import extract_features, model_config, toggles_from_config

TINY = """
synth.classes = 8
synth.groups = 2
synth.unseen = 3
synth.train_per_class = 4
synth.val_per_class = 2
synth.test_per_class = 3
synth.frames = 8
synth.motion_dim = 8
synth.cue_dim = 16
hpe.corpus_frames = 64
hpe.epochs = 1
model.n_cues = 4
model.skel_feat = 8
model.embed_dim = 16
train.epochs = 2
train.warmup_epochs = 1
train.ema_start_epoch = 1
proto.k = 3
"""


def _write_cfg(path, extra=""):
    lines = dict(line.split(" = ") for line in (TINY + extra).split("\n") if line)
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "tiny.cfg")
    assert cli.main(["synth", "--config", cfg, "--seed", "3", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", cfg, "--seed", "3", "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    assert cli.main(["eval", "--config", cfg, "--data", str(root / "data"),
                     "--checkpoint", str(root / "run" / "checkpoint.pbck"), "--out", str(root / "run")]) == 0
    return root, cfg


def test_synth_is_deterministic_and_creates_dirs(work, tmp_path):
    root, cfg = work
    out = tmp_path / "a" / "b"
    assert cli.main(["synth", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    for name in ("world.json", "data.pbck"):
        assert (out / name).read_bytes() == (root / "data" / name).read_bytes()


def test_manifest_matches_regenerated_world(work):
    root, cfg = work
    world, split = load_dataset(root / "data")
    manifest = json.loads((root / "data" / "world.json").read_text())
    assert manifest["unseen"] == split.unseen_ids
    assert manifest["groups"] == {str(g): m for g, m in world.groups().items()}
    assert manifest["counts"]["test"] == len(split.test)


def test_train_outputs(work):
    root, _ = work
    log = [json.loads(line) for line in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1, 2]
    arrays = checkpoint.load(root / "run" / "checkpoint.pbck")
    assert any(k.startswith("raw/") for k in arrays) and any(k.startswith("ema/") for k in arrays)
    assert any(k.startswith("centroid/") for k in arrays) and any(k.startswith("proto/") for k in arrays)
    cues = checkpoint.load(root / "run" / "cues.pbck")
    assert all(k.startswith("cues/train/") or k.startswith("cues/val/") for k in cues)


def test_zero_epochs_writes_the_initialisation(work, tmp_path):
    root, _ = work
    cfg_path = _write_cfg(tmp_path / "zero.cfg", "train.epochs = 0\ntrain.warmup_epochs = 0\n")
    assert cli.main(["train", "--config", cfg_path, "--seed", "3", "--data", str(root / "data"),
                     "--out", str(tmp_path / "run")]) == 0
    arrays = checkpoint.load(tmp_path / "run" / "checkpoint.pbck")
    world, split = load_dataset(root / "data")
    cfg = config.load(cfg_path)
    mcfg = model_config(cfg, world, len(split.seen_ids), toggles_from_config(cfg))
    for k, v in init_model_params(mcfg, 3).items():
        assert arrays[f"raw/{k}"].tobytes() == v.tobytes()
        assert arrays[f"ema/{k}"].tobytes() == v.tobytes()


def test_eval_matches_library_call(work):
    root, cfg_path = work
    cfg = config.load(cfg_path)
    world, split = load_dataset(root / "data")
    run = from_arrays(checkpoint.load(root / "run" / "checkpoint.pbck"), cfg, world)
    feats = extract_features(split.test, world, run.models, cfg)[run.toggles.hpe_key]
    z = embed(run.ema, run.model_config, feats.skeletons, feats.cues)["z_b"]
    m = evaluate(z, feats.labels, run.table, run.kappa)
    out = json.loads((root / "run" / "metrics.json").read_text())
    assert (out["zsl_acc"], out["S"], out["U"], out["H"]) == (m.zsl_acc, m.S, m.U, m.H)
    assert out["confusion"] == m.confusion.tolist()
    assert out["seed"] == 3 and out["kappa"] == run.kappa
    assert "timestamp" not in json.dumps(out)


def test_train_then_eval_twice_is_bit_identical(work, tmp_path):
    root, cfg = work
    out = tmp_path / "again"
    assert cli.main(["train", "--config", cfg, "--seed", "3", "--data", str(root / "data"), "--out", str(out)]) == 0
    assert cli.main(["eval", "--config", cfg, "--data", str(root / "data"),
                     "--checkpoint", str(out / "checkpoint.pbck"), "--out", str(out)]) == 0
    for name in ("checkpoint.pbck", "train_log.jsonl", "metrics.json", "cues.pbck"):
        assert (out / name).read_bytes() == (root / "run" / name).read_bytes()


def test_eval_shape_mismatch_names_the_tensor(work, tmp_path, capsys):
    root, _ = work
    cfg = _write_cfg(tmp_path / "wide.cfg", "model.embed_dim = 8\n")
    code = cli.main(["eval", "--config", cfg, "--data", str(root / "data"),
                     "--checkpoint", str(root / "run" / "checkpoint.pbck"), "--out", str(tmp_path)])
    assert code == 1
    assert "raw/" in capsys.readouterr().err


def test_exit_codes(work, tmp_path):
    root, cfg = work
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("train.lrr = 1\n", encoding="utf-8")
    assert cli.main(["synth", "--config", str(bad_cfg), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["synth", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "nodata"), "--out", str(tmp_path)]) == 2
    junk = tmp_path / "junk.pbck"
    junk.write_bytes(b"JUNKJUNKJUNK")
    assert cli.main(["eval", "--config", cfg, "--data", str(root / "data"), "--checkpoint", str(junk),
                     "--out", str(tmp_path)]) == 2


def _quick_suite(monkeypatch):
    monkeypatch.setattr(cli, "run_suite", functools.partial(cli.run_suite, names=["loss/cls", "fwd/adapt_seen"],
                                                            points=2))


def test_gradcheck_passes_and_writes_report(monkeypatch, tmp_path, capsys):
    _quick_suite(monkeypatch)
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = (tmp_path / "gradcheck.txt").read_text()
    assert "worst:" in report and "max_rel_err" in report
    assert "PASS total" in capsys.readouterr().out


def test_gradcheck_fails_on_injected_wrong_gradient(monkeypatch, tmp_path):
    _quick_suite(monkeypatch)
    good = ops.mul.backward
    monkeypatch.setattr(ops.mul, "backward", lambda g, out, a, b: tuple(1.5 * x for x in good(g, out, a, b)))
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 1
    assert "FAIL total" in (tmp_path / "gradcheck.txt").read_text()


def test_ablate_rows_match_cli_runs(work, tmp_path, monkeypatch):
    root, cfg = work
    from posebridge import pipeline

    full_and_base = [pipeline.Toggles(), pipeline.Toggles(False, False, False, False)]
    monkeypatch.setattr(cli, "ablation", functools.partial(pipeline.ablation, rows=full_and_base))
    assert cli.main(["ablate", "--config", cfg, "--seed", "3", "--data", str(root / "data"),
                     "--out", str(tmp_path)]) == 0
    with open(tmp_path / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["hr", "bp", "sb", "pa", "zsl", "gzsl_h"]
    assert [r["hr"] + r["bp"] + r["sb"] + r["pa"] for r in rows] == ["1111", "0000"]
    metrics = json.loads((root / "run" / "metrics.json").read_text())
    assert float(rows[0]["zsl"]) == pytest.approx(metrics["zsl_acc"], abs=5e-7)
    assert float(rows[0]["gzsl_h"]) == pytest.approx(metrics["H"], abs=5e-7)
    assert np.isfinite(float(rows[1]["zsl"]))
