"""Deterministic toy world for zero-shot skeleton action recognition.

Each class has a skeleton-motion latent and a cue latent. Classes inside a
confusable group share the motion latent exactly, so their skeletons are
indistinguishable, while their cue latents are nearly orthogonal; only the
pose-anchored cues tell them apart. Text prototypes blend both latents.

Videos render to per-frame feature pyramids for the pose-estimation stage:
cue evidence sits on the body region (strong at the shallow level, weak at
the deep level), a per-video distractor fills the background, and a per-frame
nuisance vector is added everywhere.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, PoseBridgeError
from .rng import derive_seed, make_rng

# COCO-17 joint layout, rest pose in normalised image coordinates (x, y).
REST_POSE = np.array(
    [
        [0.50, 0.30], [0.48, 0.28], [0.52, 0.28], [0.46, 0.29], [0.54, 0.29],
        [0.42, 0.38], [0.58, 0.38], [0.39, 0.48], [0.61, 0.48], [0.38, 0.57],
        [0.62, 0.57], [0.45, 0.58], [0.55, 0.58], [0.45, 0.68], [0.55, 0.68],
        [0.45, 0.78], [0.55, 0.78],
    ]
)
COCO_EDGES = [
    (0, 1), (0, 2), (1, 3), (2, 4), (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12), (11, 13), (13, 15), (12, 14), (14, 16), (0, 5), (0, 6),
]


def skeleton_adjacency(joints: int = 17) -> np.ndarray:
    """Symmetrically normalised adjacency with self loops, D^-1/2 (A+I) D^-1/2."""
    a = np.eye(joints)
    if joints == 17:
        edges = COCO_EDGES
    else:
        edges = [(i, i + 1) for i in range(joints - 1)]
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


@dataclass(frozen=True)
class WorldConfig:
    classes: int = 20
    groups: int = 4
    motion_dim: int = 16
    cue_dim: int = 64
    motion_rank: int = 6
    cue_rank: int = 8
    joints: int = 17
    frames: int = 32
    sigma_s: float = 0.05
    sigma_p: float = 0.1
    motion_amplitude: float = 0.12
    cue_modulation: float = 0.3
    caption_noise: float = 0.3
    text_motion_weight: float = 0.5
    text_cue_weight: float = 0.85
    text_noise: float = 0.15
    group_cue_max_dot: float = 0.2
    resolutions: tuple[int, ...] = (16, 12, 10)
    channels: tuple[int, ...] = (16, 16, 16)
    cue_gains: tuple[float, ...] = (1.0, 0.6, 0.35)
    pose_gains: tuple[float, ...] = (0.2, 0.3, 0.5)
    background_gain: float = 0.8
    nuisance: float = 0.15
    heatmap_sigma: float = 1.5


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    motion: np.ndarray
    cue: np.ndarray
    text: np.ndarray
    group: int = -1  # -1: not in a confusable group


@dataclass
class World:
    config: WorldConfig
    seed: int
    classes: list[ClassSpec]
    joint_basis: np.ndarray  # (motion_dim, J, 2)
    joint_phase: np.ndarray  # (J,)
    modulation_map: np.ndarray  # (cue_dim, motion_dim)
    render_maps: list[np.ndarray]  # per level (channels, cue_dim)
    pose_maps: list[np.ndarray]  # per level (J, channels)

    def spec(self, class_id: int) -> ClassSpec:
        return self.classes[class_id]

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for c in self.classes:
            if c.group >= 0:
                out.setdefault(c.group, []).append(c.class_id)
        return out

    def text_prototypes(self) -> np.ndarray:
        return np.stack([c.text for c in self.classes])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _semi_orthogonal(rng, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    return q if rows >= cols else q.T


def make_world(n_classes: int = 20, n_groups: int = 4, seed: int = 0, config: WorldConfig | None = None) -> World:
    """Class specs plus the fixed rendering maps for one seeded world."""
    cfg = config or WorldConfig()
    cfg = WorldConfig(**{**asdict(cfg), "classes": n_classes, "groups": n_groups})
    if n_classes < 2 * n_groups or n_classes < 2:
        raise PoseBridgeError(f"cannot form {n_groups} pairs from {n_classes} classes")
    rng = make_rng(seed, "world")
    motion_basis = _semi_orthogonal(rng, cfg.motion_dim, cfg.motion_rank)
    cue_basis = _semi_orthogonal(rng, cfg.cue_dim, cfg.cue_rank)
    text_motion_map = _semi_orthogonal(rng, cfg.cue_dim, cfg.motion_dim)

    def motion_latent():
        return _unit(motion_basis @ rng.standard_normal(cfg.motion_rank))

    def cue_latent():
        return _unit(cue_basis @ rng.standard_normal(cfg.cue_rank))

    motions, cues, groups = [], [], []
    for g in range(n_groups):
        m = motion_latent()
        a = cue_latent()
        for _ in range(1000):
            b = cue_latent()
            if a @ b <= cfg.group_cue_max_dot:
                break
        else:  # pragma: no cover - rank >= 2 makes this practically unreachable
            raise PoseBridgeError("could not draw dissimilar cue latents for a group")
        motions += [m, m.copy()]
        cues += [a, b]
        groups += [g, g]
    for _ in range(n_classes - 2 * n_groups):
        motions.append(motion_latent())
        cues.append(cue_latent())
        groups.append(-1)

    classes = []
    for cid, (m, c, g) in enumerate(zip(motions, cues, groups)):
        noise = rng.standard_normal(cfg.cue_dim) / np.sqrt(cfg.cue_dim)
        text = _unit(
            cfg.text_motion_weight * (text_motion_map @ m)
            + cfg.text_cue_weight * c
            + cfg.text_noise * noise
        )
        classes.append(ClassSpec(cid, m, c, text, g))

    joint_basis = rng.standard_normal((cfg.motion_dim, cfg.joints, 2))
    joint_phase = rng.uniform(0.0, 2.0 * np.pi, cfg.joints)
    modulation_map = _semi_orthogonal(rng, cfg.cue_dim, cfg.motion_dim)
    render_maps = [_semi_orthogonal(rng, ch, cfg.cue_dim) for ch in cfg.channels]
    pose_maps = [rng.standard_normal((cfg.joints, ch)) / np.sqrt(cfg.joints) for ch in cfg.channels]
    return World(cfg, seed, classes, joint_basis, joint_phase, modulation_map, render_maps, pose_maps)


def _rest_pose(joints: int) -> np.ndarray:
    if joints == 17:
        return REST_POSE
    y = np.linspace(0.3, 0.78, joints)
    return np.stack([np.full(joints, 0.5), y], axis=1)


@dataclass
class Video:
    video_id: str
    class_id: int
    skeleton: np.ndarray  # (T, J, 2)
    cues: np.ndarray  # (T, d), unit rows
    caption: np.ndarray  # (d,)
    background: np.ndarray  # (d,)

    def heatmaps(self, resolution: int, sigma: float = 1.5) -> np.ndarray:
        return joint_heatmaps(self.skeleton, resolution, sigma)


def joint_heatmaps(skeleton: np.ndarray, resolution: int, sigma: float = 1.5) -> np.ndarray:
    """Gaussian heatmaps (..., J, H, W) with peak 1 at each joint (sigma in cells)."""
    centres = (np.arange(resolution) + 0.5) / resolution
    x = skeleton[..., 0][..., None] - centres  # (..., J, W)
    y = skeleton[..., 1][..., None] - centres  # (..., J, H)
    s = sigma / resolution
    gx = np.exp(-0.5 * (x / s) ** 2)
    gy = np.exp(-0.5 * (y / s) ** 2)
    return gy[..., :, None] * gx[..., None, :]


def sample_video(
    world: World,
    spec: ClassSpec,
    seed: int,
    video_id: str = "",
    sigma_s: float | None = None,
    sigma_p: float | None = None,
) -> Video:
    """One seeded video: skeleton trajectory, per-frame cues, caption, distractor."""
    cfg = world.config
    sigma_s = cfg.sigma_s if sigma_s is None else sigma_s
    sigma_p = cfg.sigma_p if sigma_p is None else sigma_p
    rng = make_rng(seed, "video")
    T, J, d = cfg.frames, cfg.joints, cfg.cue_dim
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(T) / T
    disp = cfg.motion_amplitude * np.einsum("mjk,m->jk", world.joint_basis, spec.motion)
    osc = 0.5 * (1.0 + np.sin(2.0 * np.pi * t[:, None] + world.joint_phase[None, :] + phase))
    skeleton = _rest_pose(J)[None] + osc[..., None] * disp[None]
    skeleton = skeleton + sigma_s * rng.standard_normal((T, J, 2))

    mod_dir = _unit(world.modulation_map @ spec.motion)
    wave = np.sin(2.0 * np.pi * t + phase)
    cues = spec.cue[None] + cfg.cue_modulation * wave[:, None] * mod_dir[None]
    cues = cues + sigma_p / np.sqrt(d) * rng.standard_normal((T, d))
    cues /= np.linalg.norm(cues, axis=1, keepdims=True)

    caption = _unit(spec.cue + cfg.caption_noise / np.sqrt(d) * rng.standard_normal(d))
    background = _unit(rng.standard_normal(d))
    return Video(video_id, spec.class_id, skeleton, cues, caption, background)


def render_pyramid(world: World, skeleton: np.ndarray, cues: np.ndarray, background: np.ndarray, rng) -> list[np.ndarray]:
    """Feature maps (N, H_l, W_l, C_l) for N frames given joints (N, J, 2) and cue vectors.

    ``background`` is (N, d) or (d,). Returns shallow-to-deep levels.
    """
    cfg = world.config
    n = skeleton.shape[0]
    background = np.broadcast_to(background, cues.shape)
    deep_res = cfg.resolutions[-1]
    levels = []
    for li, (res, ch) in enumerate(zip(cfg.resolutions, cfg.channels)):
        heat = joint_heatmaps(skeleton, res, cfg.heatmap_sigma * res / deep_res)  # (N,J,H,W)
        body = 1.0 - np.prod(1.0 - heat, axis=1)  # soft union, (N,H,W)
        sig = cues @ world.render_maps[li].T  # (N,C)
        bg = background @ world.render_maps[li].T
        feat = cfg.cue_gains[li] * body[..., None] * sig[:, None, None, :]
        feat += cfg.background_gain * (1.0 - body)[..., None] * bg[:, None, None, :]
        feat += cfg.pose_gains[li] * np.einsum("njhw,jc->nhwc", heat, world.pose_maps[li])
        feat += cfg.nuisance * rng.standard_normal((n, 1, 1, ch))
        levels.append(feat)
    return levels


@dataclass
class FrameBatch:
    """Rendered frames with their supervision for the pose-estimation stage."""

    levels: list[np.ndarray]
    heatmaps: np.ndarray  # (N, J, H_L, W_L)
    captions: np.ndarray  # (N, d)


def make_hpe_corpus(world: World, n_frames: int, seed: int) -> FrameBatch:
    """Class-agnostic captioned frames (random poses and random cue semantics)."""
    cfg = world.config
    rng = make_rng(seed, "hpe-corpus")
    d, J = cfg.cue_dim, cfg.joints
    motion = rng.standard_normal((n_frames, cfg.motion_dim))
    motion /= np.linalg.norm(motion, axis=1, keepdims=True)
    disp = cfg.motion_amplitude * np.einsum("mjk,nm->njk", world.joint_basis, motion)
    osc = 0.5 * (1.0 + np.sin(world.joint_phase[None, :] + rng.uniform(0, 2 * np.pi, (n_frames, 1))))
    skeleton = _rest_pose(J)[None] + osc[..., None] * disp
    skeleton += cfg.sigma_s * rng.standard_normal(skeleton.shape)
    cues = rng.standard_normal((n_frames, d))
    cues /= np.linalg.norm(cues, axis=1, keepdims=True)
    background = rng.standard_normal((n_frames, d))
    background /= np.linalg.norm(background, axis=1, keepdims=True)
    captions = cues + cfg.caption_noise / np.sqrt(d) * rng.standard_normal((n_frames, d))
    captions /= np.linalg.norm(captions, axis=1, keepdims=True)
    levels = render_pyramid(world, skeleton, cues, background, rng)
    heat = joint_heatmaps(skeleton, cfg.resolutions[-1], cfg.heatmap_sigma)
    return FrameBatch(levels, heat, captions)


def render_video_frames(world: World, video: Video, frame_ids: np.ndarray) -> FrameBatch:
    """Render the selected frames of one video (deterministic per video id)."""
    rng = make_rng(world.seed, "render", video.video_id)
    skel = video.skeleton[frame_ids]
    levels = render_pyramid(world, skel, video.cues[frame_ids], video.background, rng)
    heat = joint_heatmaps(skel, world.config.resolutions[-1], world.config.heatmap_sigma)
    return FrameBatch(levels, heat, np.broadcast_to(video.caption, (len(frame_ids), video.caption.size)))


# --- splits with access instrumentation -----------------------------------------


@dataclass
class AccessLog:
    """Counts reads of samples per (store, class) and per (phase, class)."""

    counts: Counter = field(default_factory=Counter)
    phase_counts: Counter = field(default_factory=Counter)
    phase: str = "idle"

    @contextmanager
    def during(self, phase: str):
        prev, self.phase = self.phase, phase
        try:
            yield self
        finally:
            self.phase = prev

    def record(self, store: str, class_id: int) -> None:
        self.counts[(store, class_id)] += 1
        self.phase_counts[(self.phase, class_id)] += 1

    def reads(self, class_ids, store: str | None = None, phase: str | None = None) -> int:
        class_ids = set(int(c) for c in class_ids)
        if phase is not None:
            if store is not None:
                raise PoseBridgeError("filter by store or by phase, not both")
            return sum(n for (ph, c), n in self.phase_counts.items() if c in class_ids and ph == phase)
        return sum(n for (s, c), n in self.counts.items() if c in class_ids and (store is None or s == store))


class SampleStore:
    """Ordered collection of videos; every item access is logged."""

    def __init__(self, name: str, videos: list[Video], log: AccessLog | None = None):
        self.name = name
        self._videos = list(videos)
        self.log = log if log is not None else AccessLog()

    def __len__(self) -> int:
        return len(self._videos)

    def __getitem__(self, i: int) -> Video:
        v = self._videos[i]
        self.log.record(self.name, v.class_id)
        return v

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self) -> np.ndarray:
        # label metadata only; does not touch sample payloads
        return np.array([v.class_id for v in self._videos], dtype=int)

    @property
    def video_ids(self) -> list[str]:
        return [v.video_id for v in self._videos]

    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def subset(self, class_ids) -> "SampleStore":
        keep = set(int(c) for c in class_ids)
        return SampleStore(self.name, [v for v in self._videos if v.class_id in keep], self.log)


@dataclass
class Split:
    world: World
    seed: int
    seen_ids: list[int]
    unseen_ids: list[int]
    train: SampleStore
    val: SampleStore
    test: SampleStore
    log: AccessLog

    @property
    def straddling_unseen(self) -> list[int]:
        """Unseen classes whose confusable partner is seen."""
        out = []
        for members in self.world.groups().values():
            if any(m in self.seen_ids for m in members):
                out += [m for m in members if m in self.unseen_ids]
        return sorted(out)

    def manifest(self) -> dict:
        cfg = self.world.config
        return {
            "seed": self.seed,
            "world_seed": self.world.seed,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
            "groups": {str(g): m for g, m in self.world.groups().items()},
            "seen": self.seen_ids,
            "unseen": self.unseen_ids,
            "straddling_unseen": self.straddling_unseen,
            "counts": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
        }


def choose_unseen(world: World, unseen_count: int, seed: int) -> list[int]:
    """Unseen ids such that at least one confusable group straddles the split.

    Up to half of the groups straddle (one member unseen, its partner seen).
    When room remains, one further group goes entirely unseen so that two
    unseen classes share their skeleton dynamics; the rest are free classes.
    """
    n = len(world.classes)
    if not 1 <= unseen_count < n:
        raise PoseBridgeError(f"unseen count must be in [1, {n - 1}]")
    groups = world.groups()
    if not groups:
        raise PoseBridgeError("straddling guarantee needs at least one confusable group")
    rng = make_rng(seed, "split")
    n_straddle = max(1, min(len(groups) // 2, unseen_count, n - unseen_count))
    group_ids = [sorted(groups)[i] for i in rng.permutation(len(groups))]
    straddle, rest = group_ids[:n_straddle], group_ids[n_straddle:]
    unseen = [groups[g][int(rng.integers(2))] for g in straddle]
    if rest and unseen_count - len(unseen) >= 2:
        unseen += groups[rest.pop(0)]
    keep_seen = {m for g in straddle for m in groups[g]} - set(unseen)
    free = [c.class_id for c in world.classes if c.group < 0]
    grouped = [m for g in rest for m in groups[g]]
    pool = [free[i] for i in rng.permutation(len(free))] + [grouped[i] for i in rng.permutation(len(grouped))]
    pool = [c for c in pool if c not in keep_seen and c not in unseen]
    need = unseen_count - len(unseen)
    if need > len(pool):
        raise PoseBridgeError("straddling guarantee infeasible for this unseen count")
    unseen += pool[:need]
    return sorted(unseen)


def make_split(
    world: World,
    unseen_count: int = 4,
    seed: int = 0,
    train_per_class: int = 50,
    test_per_class: int = 20,
    val_per_class: int = 10,
) -> Split:
    unseen = choose_unseen(world, unseen_count, seed)
    seen = [c.class_id for c in world.classes if c.class_id not in unseen]
    log = AccessLog()

    def videos(split: str, class_ids, count):
        return [
            sample_video(world, world.spec(c), seed=_video_seed(world, seed, split, c, i), video_id=f"{split}/{c}/{i}")
            for c in class_ids
            for i in range(count)
        ]

    return Split(
        world,
        seed,
        seen,
        unseen,
        SampleStore("train", videos("train", seen, train_per_class), log),
        SampleStore("val", videos("val", seen, val_per_class), log),
        SampleStore("test", videos("test", seen + unseen, test_per_class), log),
        log,
    )


def _video_seed(world: World, seed: int, split: str, class_id: int, index: int) -> int:
    return derive_seed(world.seed, seed, split, class_id, index)


def assert_seen_only(store: SampleStore, seen_ids) -> None:
    bad = sorted(set(store.labels.tolist()) - set(int(c) for c in seen_ids))
    if bad:
        raise ContractViolation(f"training data contains unseen classes {bad}")
