import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posebridge.errors import ContractViolation, NonFiniteError, PoseBridgeError, ShapeError
from posebridge.model import ModelConfig
from posebridge.prototypes import PrototypeTable
from posebridge.trainer import (EmaState, FeatureSet, OptimState, Schedule, TrainConfig, clip_gradients,
                                ema_update, global_norm, lr_at, optimizer_step, train)

# --- schedule -----------------------------------------------------------------------------

SCHED = Schedule(lr=1e-3, warmup_epochs=5, epochs=30, min_lr=1e-6, steps_per_epoch=4)


def test_lr_ramp_starts_at_zero():
    assert lr_at(0, SCHED) == 0.0


def test_lr_reaches_base_at_end_of_warmup():
    assert lr_at(SCHED.warmup_steps, SCHED) == SCHED.lr


def test_lr_final_step_is_min():
    assert abs(lr_at(SCHED.total_steps, SCHED) - SCHED.min_lr) < 1e-12


def test_lr_cosine_midpoint():
    mid = SCHED.warmup_steps + (SCHED.total_steps - SCHED.warmup_steps) // 2
    assert lr_at(mid, SCHED) == pytest.approx((SCHED.lr + SCHED.min_lr) / 2, rel=1e-12)


def test_lr_is_linear_during_warmup():
    assert lr_at(10, SCHED) == pytest.approx(SCHED.lr * 10 / 20)


@given(st.integers(0, 200))
def test_lr_bounded(step):
    lr = lr_at(step, SCHED)
    assert 0.0 <= lr <= SCHED.lr
    if step >= SCHED.warmup_steps:
        assert lr >= SCHED.min_lr - 1e-18


def test_lr_nonincreasing_after_warmup():
    lrs = [lr_at(s, SCHED) for s in range(SCHED.warmup_steps, SCHED.total_steps + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("kw", [dict(warmup_epochs=30, epochs=30), dict(min_lr=1.0, lr=0.1)])
def test_schedule_validation(kw):
    with pytest.raises(PoseBridgeError):
        Schedule(**kw)


# --- optimiser ----------------------------------------------------------------------------


def _step(theta, g, lr, wd, state=None):
    params = {"w": np.array(theta, dtype=float)}
    state = state or OptimState.zeros_like(params)
    optimizer_step(params, {"w": np.array(g, dtype=float)}, state, lr, wd)
    return params["w"], state


def test_zero_gradient_zero_decay_is_identity():
    theta = np.array([0.3, -1.2, 2.0])
    out, _ = _step(theta, np.zeros(3), 0.1, 0.0)
    np.testing.assert_array_equal(out, theta)


def test_first_step_hand_oracle():
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    out, _ = _step([0.0], [1.0], 0.1, 0.0)
    assert out[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_decoupled_decay_only():
    out, _ = _step([1.0], [0.0], 0.1, 0.01)
    assert out[0] == pytest.approx(0.999, abs=1e-15)


def test_two_step_recurrence():
    theta, state = _step([0.5], [2.0], 0.01, 0.0)
    theta, state = _step(theta, [-1.0], 0.01, 0.0, state)
    m1, v1 = 0.1 * 2.0, 0.001 * 4.0
    m2, v2 = 0.9 * m1 + 0.1 * -1.0, 0.999 * v1 + 0.001 * 1.0
    first = 0.5 - 0.01 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    second = first - 0.01 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert theta[0] == pytest.approx(second, rel=1e-12)
    assert state.step == 2


def test_optimizer_rejects_nonfinite_gradient():
    with pytest.raises(NonFiniteError):
        _step([1.0], [np.nan], 0.1, 0.0)


def test_optimizer_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        _step([1.0, 2.0], [1.0], 0.1, 0.0)


def test_moments_match_parameter_shapes():
    params = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    state = OptimState.zeros_like(params)
    assert all(state.m[k].shape == v.shape == state.v[k].shape for k, v in params.items())
    assert state.step == 0


# --- clipping -----------------------------------------------------------------------------


def test_clip_below_threshold_is_identity():
    g = {"a": np.array([0.3, 0.4])}
    out = clip_gradients(g, 1.0)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_norm_two_halves():
    g = {"a": np.array([1.2, 0.0]), "b": np.array([[1.6]])}
    out = clip_gradients(g, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.0])
    assert abs(global_norm(out) - 1.0) < 1e-10


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(0.1, 5.0))
def test_clip_post_norm_bounded(values, max_norm):
    g = {"x": np.array(values)}
    out = clip_gradients(g, max_norm)
    assert global_norm(out) <= max_norm * (1 + 1e-12)
    if global_norm(g) <= max_norm:
        np.testing.assert_array_equal(out["x"], g["x"])


# --- EMA ----------------------------------------------------------------------------------


def test_ema_decay_zero_copies():
    ema = EmaState.from_params({"w": np.zeros(2)}, decay=0.0, start_epoch=0)
    ema_update(ema, {"w": np.array([1.0, 2.0])}, 3)
    np.testing.assert_array_equal(ema.shadow["w"], [1.0, 2.0])


def test_ema_copies_before_start_epoch():
    ema = EmaState.from_params({"w": np.zeros(1)}, decay=0.999, start_epoch=5)
    ema_update(ema, {"w": np.array([4.0])}, 4)
    assert ema.shadow["w"][0] == 4.0


def test_ema_two_steps_hand_recurrence():
    ema = EmaState.from_params({"w": np.array([1.0])}, decay=0.5, start_epoch=0)
    ema_update(ema, {"w": np.array([3.0])}, 0)
    ema_update(ema, {"w": np.array([5.0])}, 1)
    assert ema.shadow["w"][0] == 0.5 * (0.5 * 1.0 + 0.5 * 3.0) + 0.5 * 5.0


def test_ema_constant_params_converge_geometrically():
    ema = EmaState.from_params({"w": np.array([0.0])}, decay=0.9, start_epoch=0)
    for k in range(1, 30):
        ema_update(ema, {"w": np.array([1.0])}, k)
        assert abs(ema.shadow["w"][0] - 1.0) == pytest.approx(0.9**k, rel=1e-9)


def test_ema_shape_mismatch():
    ema = EmaState.from_params({"w": np.zeros(2)})
    with pytest.raises(ShapeError):
        ema_update(ema, {"w": np.zeros(3)}, 6)


def test_ema_negative_epoch():
    ema = EmaState.from_params({"w": np.zeros(2)})
    with pytest.raises(PoseBridgeError):
        ema_update(ema, {"w": np.zeros(2)}, -1)


# --- training loop ------------------------------------------------------------------------

MCFG = ModelConfig(joints=3, joint_embed=2, skel_feat=6, cue_dim=4, embed_dim=4, heads=2, n_cues=3, n_seen=3)


def _toy(n_per_class=6, seed=0, classes=(0, 1, 2), n_total=4):
    """Separable toy data: class identity is carried by the skeleton offset and the cue direction."""
    rng = np.random.default_rng(seed)
    protos = np.linalg.qr(rng.standard_normal((4, 4)))[0][:n_total]
    skel, cues, labels = [], [], []
    for c in classes:
        for _ in range(n_per_class):
            base = np.zeros((5, 3, 2))
            base[..., 0] += 0.5 * (c - 1)
            skel.append(base + 0.05 * rng.standard_normal((5, 3, 2)))
            cue = protos[c] + 0.05 * rng.standard_normal((3, 4))
            cues.append(cue / np.linalg.norm(cue, axis=-1, keepdims=True))
            labels.append(c)
    data = FeatureSet(np.stack(skel), np.stack(cues), np.array(labels))
    table = PrototypeTable.from_matrix(protos, [0, 1, 2], [3])
    return data, table


def _cfg(epochs, seed=0, warmup=1):
    return TrainConfig(Schedule(lr=1e-2, warmup_epochs=min(warmup, max(0, epochs - 1)), epochs=epochs, batch_size=6),
                       ema_decay=0.9, ema_start_epoch=1, seed=seed)


def test_zero_epochs_keeps_initialisation():
    data, table = _toy()
    res = train(_cfg(0), MCFG, data, table)
    assert list(res.params.arrays) == list(res.initial)
    for k, v in res.initial.items():
        np.testing.assert_array_equal(res.params.arrays[k], v)
        np.testing.assert_array_equal(res.ema[k], v)
    assert [r["epoch"] for r in res.log] == [0]


def test_training_is_bit_deterministic():
    data, table = _toy()
    a = train(_cfg(3, seed=5), MCFG, data, table)
    b = train(_cfg(3, seed=5), MCFG, data, table)
    assert a.log == b.log
    for k in a.params.arrays:
        assert a.params.arrays[k].tobytes() == b.params.arrays[k].tobytes()
        assert a.ema[k].tobytes() == b.ema[k].tobytes()


def test_seed_changes_the_run():
    data, table = _toy()
    a = train(_cfg(2, seed=1), MCFG, data, table)
    b = train(_cfg(2, seed=2), MCFG, data, table)
    assert a.log != b.log


def test_unseen_label_is_rejected():
    data, table = _toy(classes=(0, 1, 3))
    with pytest.raises(ContractViolation):
        train(_cfg(1), MCFG, data, table)


def test_log_records_have_the_documented_fields():
    data, table = _toy()
    res = train(_cfg(2), MCFG, data, table)
    assert [r["epoch"] for r in res.log] == [0, 1, 2]
    for r in res.log:
        assert set(r) == {"epoch", "lr", "loss_total", "loss_s", "loss_p", "loss_b", "loss_align"}
        assert all(math.isfinite(v) for v in r.values())


def test_centroids_cover_seen_classes_and_are_unit():
    data, table = _toy()
    res = train(_cfg(1), MCFG, data, table)
    assert sorted(res.centroids.centroids) == [0, 1, 2]
    for c in (0, 1, 2):
        assert np.linalg.norm(res.centroids.centroids[c]) == pytest.approx(1.0)
        assert res.centroids.counts[c] == 6


def test_loss_smoothed_nonincreasing_on_separable_toy():
    data, table = _toy(n_per_class=8)
    cfg = TrainConfig(Schedule(lr=5e-3, warmup_epochs=2, epochs=25, batch_size=24), ema_decay=0.9,
                      ema_start_epoch=1, seed=0)
    losses = np.array([r["loss_total"] for r in train(cfg, MCFG, data, table).log[1:]])
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    after = smooth[cfg.schedule.warmup_epochs:]
    assert np.all(np.diff(after) <= 1e-9)
    assert losses[-1] < losses[0]


def test_default_world_loss_drop():
    # threshold frozen from the five-seed pilot: final/initial 0.504-0.528 for the full model,
    # so a 50% drop is narrowly missed (docs/pilot.md)
    from posebridge.config import Config
    from posebridge.pipeline import Toggles, run

    res = run(Config(), 0, Toggles())
    log = res.train.log
    assert len(log) == 31
    assert log[-1]["loss_total"] < 0.55 * log[0]["loss_total"]
    assert res.train.model_config.n_seen == 16
