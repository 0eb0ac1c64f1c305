"""End-to-end orchestration: world, pose stage, cue extraction, training and evaluation.

The component switches follow the ablation grid: ``hr`` and ``bp`` select the
pose-stage variant, ``sb`` the semantic bridge and ``pa`` prototype
adaptation. With both ``sb`` and ``pa`` off the cues are never consumed and
the run is the skeleton-only baseline.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .errors import ContractViolation, PoseBridgeError
from .evaluation import Metrics, evaluate, sweep_kappa
from .hpe import HPEConfig, HPEModel, train_hpe
from .model import ModelConfig, embed, sample_indices
from .objectives import LossWeights
from .prototypes import CentroidTable, PrototypeTable, adapt_table, identity_table
from .rng import make_rng
from .synth import Split, World, WorldConfig, make_hpe_corpus, make_split, make_world, render_video_frames
from .trainer import FeatureSet, Schedule, TrainConfig, TrainResult, train


@dataclass(frozen=True)
class Toggles:
    hr: bool = True
    bp: bool = True
    sb: bool = True
    pa: bool = True

    @property
    def uses_cues(self) -> bool:
        return self.sb or self.pa

    @property
    def hpe_key(self) -> tuple[bool, bool]:
        return (self.hr, self.bp)

    def row(self) -> dict[str, int]:
        return {"hr": int(self.hr), "bp": int(self.bp), "sb": int(self.sb), "pa": int(self.pa)}


FULL = Toggles()
BASELINE = Toggles(False, False, False, False)


def toggles_from_config(cfg: Config) -> Toggles:
    return Toggles(cfg["hpe.hr"], cfg["hpe.bp"], cfg["bridge.sb"], cfg["proto.pa"])


# --- builders from configuration --------------------------------------------------------


def world_config(cfg: Config) -> WorldConfig:
    return WorldConfig(
        classes=cfg["synth.classes"], groups=cfg["synth.groups"], motion_dim=cfg["synth.motion_dim"],
        cue_dim=cfg["synth.cue_dim"], joints=cfg["synth.joints"], frames=cfg["synth.frames"],
        sigma_s=cfg["synth.sigma_s"], sigma_p=cfg["synth.sigma_p"],
    )


def build_world(cfg: Config, seed: int) -> World:
    return make_world(cfg["synth.classes"], cfg["synth.groups"], seed, world_config(cfg))


def build_split(world: World, cfg: Config, seed: int) -> Split:
    return make_split(world, cfg["synth.unseen"], seed, cfg["synth.train_per_class"],
                      cfg["synth.test_per_class"], cfg["synth.val_per_class"])


def hpe_config(cfg: Config, world: World, hr: bool, bp: bool) -> HPEConfig:
    wc = world.config
    return HPEConfig(
        channels=tuple(wc.channels), resolutions=tuple(wc.resolutions), joints=wc.joints,
        cue_dim=wc.cue_dim, text_dim=wc.cue_dim, alpha=cfg["hpe.alpha"], tau=cfg["hpe.tau"],
        eps=cfg["hpe.eps"], lambda_hpe=cfg["hpe.lambda_sem"], hr=hr, bp=bp,
        corpus_frames=cfg["hpe.corpus_frames"], epochs=cfg["hpe.epochs"],
        batch_size=cfg["hpe.batch_size"], lr=cfg["hpe.lr"],
        warmup_epochs=min(1, max(0, cfg["hpe.epochs"] - 1)),
    )


def model_config(cfg: Config, world: World, n_seen: int, t: Toggles) -> ModelConfig:
    return ModelConfig(
        joints=world.config.joints, joint_embed=cfg["model.joint_embed"], skel_feat=cfg["model.skel_feat"],
        cue_dim=world.config.cue_dim, embed_dim=cfg["model.embed_dim"], heads=cfg["bridge.heads"],
        ffn_mult=cfg["bridge.ffn_mult"], dropout=cfg["bridge.dropout"], n_cues=cfg["model.n_cues"],
        n_seen=n_seen, sb=t.sb, use_cues=t.uses_cues,
    )


def train_config(cfg: Config, seed: int) -> TrainConfig:
    sched = Schedule(lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
                     warmup_epochs=cfg["train.warmup_epochs"], epochs=cfg["train.epochs"],
                     min_lr=cfg["train.min_lr"], batch_size=cfg["train.batch_size"])
    return TrainConfig(sched, cfg["train.ema_decay"], cfg["train.ema_start_epoch"], cfg["train.clip_norm"], seed)


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(**cfg.section("loss"))


def prototype_table(world: World, split: Split) -> PrototypeTable:
    return PrototypeTable.from_matrix(world.text_prototypes(), split.seen_ids, split.unseen_ids)


# --- pose stage and features --------------------------------------------------------------


def train_pose_stages(cfg: Config, world: World, seed: int, keys) -> dict[tuple[bool, bool], HPEModel]:
    """One trained pose model per (hr, bp) key, all on the same class-agnostic corpus."""
    keys = sorted(set(keys))
    if not keys or cfg["hpe.mode"] == "direct":
        return {}
    corpus = make_hpe_corpus(world, cfg["hpe.corpus_frames"], seed)
    return {k: train_hpe(hpe_config(cfg, world, *k), corpus, seed) for k in keys}


def extract_features(store, world: World, models: dict, cfg: Config, with_cues: bool = True,
                     chunk: int = 32) -> dict:
    """Skeletons, labels and sampled cues for every video in ``store``.

    Each sampled frame is rendered once and shared by all pose models. Keys of
    the result are the pose-model keys, or ``"direct"`` for generator cues.
    """
    n_cues = cfg["model.n_cues"]
    idx = sample_indices(world.config.frames, n_cues)
    skeletons, labels = [], []
    cues: dict = {k: [] for k in models}
    direct = with_cues and cfg["hpe.mode"] == "direct"
    if direct:
        cues = {"direct": []}
    pending = []

    def flush():
        if not pending:
            return
        levels = [np.concatenate([fb.levels[l] for fb in pending]) for l in range(len(pending[0].levels))]
        heat = np.concatenate([fb.heatmaps for fb in pending])
        for k, m in models.items():
            c = m.extract(levels, heat)
            cues[k].extend(c.reshape(len(pending), n_cues, -1))
        pending.clear()

    for i in range(len(store)):
        v = store[i]
        skeletons.append(v.skeleton)
        labels.append(v.class_id)
        if direct:
            cues["direct"].append(v.cues[idx])
        elif with_cues and models:
            pending.append(render_video_frames(world, v, idx))
            if len(pending) >= chunk:
                flush()
    flush()
    sk = np.stack(skeletons) if skeletons else np.zeros((0, world.config.frames, world.config.joints, 2))
    lab = np.array(labels, dtype=int)
    out = {k: FeatureSet(sk, np.stack(c) if c else None, lab) for k, c in cues.items()}
    out[None] = FeatureSet(sk, None, lab)
    return out


def feature_key(cfg: Config, t: Toggles):
    if not t.uses_cues:
        return None
    return "direct" if cfg["hpe.mode"] == "direct" else t.hpe_key


# --- training, adaptation, calibration and evaluation -------------------------------


def eval_params(cfg: Config, result: TrainResult) -> dict[str, np.ndarray]:
    return result.ema if cfg["train.eval_weights"] == "ema" else result.params.arrays


def adapted_table(cfg: Config, table: PrototypeTable, centroids: CentroidTable | None, pa: bool) -> PrototypeTable:
    if not pa:
        return identity_table(table)
    if centroids is None:
        raise PoseBridgeError("prototype adaptation needs pose-semantic centroids")
    return adapt_table(table, centroids, cfg["proto.rho"], cfg["proto.k"], cfg["proto.tau_a"])


def calibration_table(cfg: Config, table: PrototypeTable, centroids, pa: bool, seed: int) -> PrototypeTable:
    """Seen classes re-partitioned so some of them stand in for unseen ones."""
    rng = make_rng(seed, "pseudo-unseen")
    n = min(cfg["eval.pseudo_unseen"], len(table.seen) - 1)
    if n < 1:
        raise PoseBridgeError("kappa sweep needs at least two seen classes")
    pseudo = sorted(int(c) for c in rng.choice(table.seen, size=n, replace=False))
    rest = [c for c in table.seen if c not in pseudo]
    sub = PrototypeTable({c: table.vectors[c] for c in table.seen}, rest, pseudo)
    cents = None
    if centroids is not None:
        cents = CentroidTable({c: centroids.centroids[c] for c in rest}, {c: centroids.counts[c] for c in rest})
    if pa and cfg["proto.k"] > len(rest):
        cfg = cfg.override({"proto.k": len(rest)})
    return adapted_table(cfg, sub, cents, pa)


def matching_embeddings(cfg: Config, result: TrainResult, feats: FeatureSet) -> np.ndarray:
    e = embed(eval_params(cfg, result), result.model_config, feats.skeletons, feats.cues)
    return e["z_b"] if result.model_config.sb else e["z_s"]


def choose_kappa(cfg: Config, result: TrainResult, table: PrototypeTable, val: FeatureSet, pa: bool, seed: int) -> float:
    if not cfg["eval.sweep"]:
        return cfg["eval.kappa"]
    cal = calibration_table(cfg, table, result.centroids, pa, seed)
    z = matching_embeddings(cfg, result, val)
    return sweep_kappa(z, val.labels, cal, cfg["eval.kappa_grid"])


@dataclass
class RunResult:
    toggles: Toggles
    metrics: Metrics
    straddling_gzsl: float  # GZSL accuracy on unseen classes whose confusable partner is seen
    train: TrainResult
    table: PrototypeTable
    extra: dict = field(default_factory=dict)


def straddling_accuracy(metrics: Metrics, test: FeatureSet, straddling) -> float:
    """Sample-level GZSL accuracy over the straddling unseen classes."""
    counts = {c: int(np.sum(test.labels == c)) for c in straddling}
    total = sum(counts.values())
    if total == 0:
        return 0.0
    return sum(metrics.per_class[c] * counts[c] for c in straddling) / total


@dataclass
class Prepared:
    """Everything shared by the runs of one seed."""

    cfg: Config
    seed: int
    world: World
    split: Split
    table: PrototypeTable
    models: dict
    train: dict
    val: dict
    test: dict | None = None

    def test_features(self) -> dict:
        """Test features are built lazily, under the evaluation phase."""
        if self.test is None:
            with self.split.log.during("evaluate"):
                self.test = extract_features(self.split.test, self.world, self.models, self.cfg)
        return self.test


def prepare(cfg: Config, seed: int, toggle_set, split: Split | None = None) -> Prepared:
    """Pose stages and train/val features; ``split`` defaults to one generated from ``seed``."""
    if split is None:
        split = build_split(build_world(cfg, seed), cfg, seed)
    world = split.world
    keys = [t.hpe_key for t in toggle_set if t.uses_cues]
    models = train_pose_stages(cfg, world, seed, keys)
    with split.log.during("train"):
        tr = extract_features(split.train, world, models, cfg)
        va = extract_features(split.val, world, models, cfg)
    return Prepared(cfg, seed, world, split, prototype_table(world, split), models, tr, va)


def fit(prep: Prepared, t: Toggles) -> TrainResult:
    cfg, split = prep.cfg, prep.split
    feats = prep.train[feature_key(cfg, t)]
    unseen_before = split.log.reads(split.unseen_ids)
    with split.log.during("train"):
        result = train(train_config(cfg, prep.seed), model_config(cfg, prep.world, len(split.seen_ids), t),
                       feats, prep.table, loss_weights(cfg))
    if split.log.reads(split.unseen_ids) != unseen_before:
        raise ContractViolation("training touched unseen-class samples")
    return result


def assess(prep: Prepared, t: Toggles, result: TrainResult) -> RunResult:
    cfg = prep.cfg
    key = feature_key(cfg, t)
    with prep.split.log.during("adapt"):
        table = adapted_table(cfg, prep.table, result.centroids, t.pa)
        kappa = choose_kappa(cfg, result, prep.table, prep.val[key], t.pa, prep.seed)
    test = prep.test_features()[key]
    z = matching_embeddings(cfg, result, test)
    m = evaluate(z, test.labels, table, kappa)
    return RunResult(t, m, straddling_accuracy(m, test, prep.split.straddling_unseen), result, table)


def run(cfg: Config, seed: int, t: Toggles, split: Split | None = None) -> RunResult:
    prep = prepare(cfg, seed, [t], split)
    return assess(prep, t, fit(prep, t))


def grid_toggles() -> list[Toggles]:
    return [Toggles(*bits) for bits in itertools.product((False, True), repeat=4)]


def ablation(cfg: Config, seed: int, rows=None, split: Split | None = None) -> list[RunResult]:
    """Train and evaluate the requested grid rows, sharing pose stages and trainings."""
    rows = list(rows) if rows is not None else grid_toggles()
    prep = prepare(cfg, seed, rows, split)
    fits: dict = {}
    out = []
    for t in rows:
        # rows that only differ in prototype adaptation, or that ignore cues, share a trained model
        key = (feature_key(cfg, t), t.sb, t.uses_cues)
        if key not in fits:
            fits[key] = fit(prep, t)
        out.append(assess(prep, t, fits[key]))
    return out
