import math
from dataclasses import asdict, replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posebridge.errors import ContractViolation, PoseBridgeError
from posebridge.model import EmbeddingTriple
from posebridge.numerics import Tape, Tensor, grad_check
from posebridge.objectives import (LossWeights, align_loss, cls_loss, cosine_term, kl_term, label_indices,
                                   sem_loss, supcon_loss, total_loss)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _ce(logits, y):
    out = []
    for row, k in zip(logits, y):
        m = max(row)
        out.append(-(row[k] - m - math.log(sum(math.exp(v - m) for v in row))))
    return np.mean(out)


# --- classification -------------------------------------------------------------------------


def test_cls_examples():
    z = _unit(np.random.default_rng(0).standard_normal((4, 3)))
    assert cls_loss(z, [0, 1, 2, 3], np.zeros((3, 5))).item() == pytest.approx(math.log(5))
    m = 2.5
    w = np.zeros((3, 4))
    z1 = np.array([[1.0, 0.0, 0.0]])
    w[0, 2] = m
    assert cls_loss(z1, [2], w).item() == pytest.approx(math.log(1 + 3 * math.exp(-m)), abs=1e-12)
    w = np.random.default_rng(1).standard_normal((3, 5))
    b = np.random.default_rng(2).standard_normal(5)
    y = [0, 3, 1, 1]
    per = [cls_loss(z[i:i + 1], [y[i]], w, b).item() for i in range(4)]
    assert cls_loss(z, y, w, b).item() == pytest.approx(np.mean(per), abs=1e-12)


def test_unseen_label_rejected():
    with pytest.raises(ContractViolation):
        label_indices([1, 7], [1, 2, 3])
    np.testing.assert_array_equal(label_indices([3, 1, 3], [1, 2, 3]), [2, 0, 2])
    with pytest.raises(PoseBridgeError):
        cls_loss(np.ones((1, 2)), [4], np.zeros((2, 3)))


# --- semantic CE ------------------------------------------------------------------------------


def test_sem_examples():
    protos = np.eye(4)[:3]
    z = np.array([[0.0, 0.0, 0.0, 1.0]])
    assert sem_loss(z, [1], protos).item() == pytest.approx(math.log(3))
    assert sem_loss(np.eye(4)[:1], [0], protos).item() == pytest.approx(math.log(1 + 2 * math.exp(-1)), abs=1e-12)
    assert math.log(1 + 2 * math.exp(-1)) == pytest.approx(0.5514, abs=1e-4)


@given(st.integers(0, 10_000))
def test_sem_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    z, protos = _unit(rng.standard_normal((5, 4))), _unit(rng.standard_normal((6, 4)))
    y = rng.integers(0, 6, 5)
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    a = sem_loss(z, y, protos).item()
    b = sem_loss(z, inv[y], protos[perm]).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(_ce(z @ protos.T, y), abs=1e-12)


# --- supervised contrast ----------------------------------------------------------------------


def _supcon_oracle(z, y, tau):
    n = len(y)
    losses = []
    for i in range(n):
        pos = [p for p in range(n) if p != i and y[p] == y[i]]
        if not pos:
            continue
        den = sum(math.exp(z[i] @ z[a] / tau) for a in range(n) if a != i)
        losses.append(-np.mean([math.log(math.exp(z[i] @ z[p] / tau) / den) for p in pos]))
    return np.mean(losses)


def test_supcon_examples():
    z = _unit(np.random.default_rng(0).standard_normal((2, 3)))
    assert abs(supcon_loss(z, [4, 4], 0.07).item()) <= 1e-12
    with pytest.raises(PoseBridgeError):
        supcon_loss(z, [0, 1], 0.07)
    with pytest.raises(PoseBridgeError):
        supcon_loss(z[:1], [0], 0.07)
    e = np.eye(4)
    z = np.stack([e[0], e[1], e[0], e[1]])
    y = [0, 1, 0, 1]
    assert supcon_loss(z, y, 0.07).item() == pytest.approx(_supcon_oracle(z, y, 0.07), abs=1e-9)


@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_supcon_matches_oracle_and_is_nonnegative(seed, tau):
    rng = np.random.default_rng(seed)
    z = _unit(rng.standard_normal((6, 3)))
    y = rng.integers(0, 3, 6)
    if len(set(y.tolist())) == 6:
        return
    if not any((y == c).sum() > 1 for c in set(y.tolist())):
        return
    got = supcon_loss(z, y, tau).item()
    assert got == pytest.approx(_supcon_oracle(z, y, tau), rel=1e-9, abs=1e-9)
    assert got >= 0.0


# --- alignment --------------------------------------------------------------------------------


def test_align_examples():
    rng = np.random.default_rng(0)
    z = _unit(rng.standard_normal((3, 4)))
    protos = _unit(rng.standard_normal((5, 4)))
    assert abs(align_loss(z, z, protos).item()) <= 1e-12
    assert cosine_term(z, -z).item() == pytest.approx(2.0)
    assert align_loss(z, -z, protos, 0.3, 0.0).item() == pytest.approx(0.6)


def test_kl_two_class_scalar_oracle():
    protos = np.eye(2)
    zs = np.array([[0.6, 0.8]])
    zp = np.array([[1.0, 0.0]])
    p = np.exp(zp[0] / 4.0) / np.exp(zp[0] / 4.0).sum()
    q = np.exp(zs[0] / 4.0) / np.exp(zs[0] / 4.0).sum()
    expected = p[0] * math.log(p[0] / q[0]) + p[1] * math.log(p[1] / q[1])
    assert kl_term(zs, zp, protos, 4.0).item() == pytest.approx(expected, abs=1e-15)


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    zs, zp, protos = (_unit(rng.standard_normal(s)) for s in ((3, 4), (3, 4), (5, 4)))
    assert kl_term(zs, zp, protos).item() >= 0.0
    assert abs(kl_term(zp, zp, protos).item()) <= 1e-12


def test_kl_stop_gradient_tape_and_fd():
    rng = np.random.default_rng(1)
    zs, zp, protos = (_unit(rng.standard_normal(s)) for s in ((3, 4), (3, 4), (5, 4)))
    with Tape() as tape:
        a, b = tape.watch(zs), tape.watch(zp)
        out = kl_term(a, b, protos)
        ga, gb = tape.gradient(out, [a, b])
    np.testing.assert_array_equal(gb, 0.0)
    assert not tape.depends_on(out, b)
    assert np.abs(ga).max() > 0
    assert "stop_gradient" in tape.primitive_names()
    # finite differences against a student-only function agree with the tape
    rep = grad_check(lambda p: kl_term(p["zs"], zp, protos), {"zs": zs})
    assert rep.passed


# --- total ------------------------------------------------------------------------------------


def _batch(seed=0):
    rng = np.random.default_rng(seed)
    emb = EmbeddingTriple(*(Tensor(_unit(rng.standard_normal((4, 4)))) for _ in range(3)))
    params = {"cls_s/w": rng.standard_normal((4, 3)), "cls_s/b": rng.standard_normal(3),
              "cls_p/w": rng.standard_normal((4, 3)), "cls_p/b": rng.standard_normal(3)}
    return emb, np.array([0, 0, 1, 2]), _unit(rng.standard_normal((3, 4))), params


ZERO = LossWeights(**{k: (1.0 if k.startswith("tau") else 0.0) for k in asdict(LossWeights())})


def test_total_examples():
    emb, y, protos, params = _batch()
    total, _ = total_loss(emb, y, protos, replace(ZERO, tau_supcon=0.07, tau_d=4.0), params)
    assert total.item() == 0.0
    total, _ = total_loss(emb, y, protos, replace(ZERO, b_sem=1.0), params)
    assert total.item() == pytest.approx(sem_loss(emb.z_b, y, protos).item(), abs=1e-15)


def test_total_is_sum_of_components():
    emb, y, protos, params = _batch(1)
    w = LossWeights()
    z_s, z_p, z_b = emb
    expected = (
        w.s_cls * cls_loss(z_s, y, params["cls_s/w"], params["cls_s/b"]).item()
        + w.s_sem * sem_loss(z_s, y, protos).item() + w.s_con * supcon_loss(z_s, y, w.tau_supcon).item()
        + w.p_cls * cls_loss(z_p, y, params["cls_p/w"], params["cls_p/b"]).item()
        + w.p_sem * sem_loss(z_p, y, protos).item() + w.p_con * supcon_loss(z_p, y, w.tau_supcon).item()
        + w.b_sem * sem_loss(z_b, y, protos).item() + w.b_con * supcon_loss(z_b, y, w.tau_supcon).item()
        + align_loss(z_s, z_p, protos, w.s2p, w.kd, w.tau_d).item()
    )
    total, parts = total_loss(emb, y, protos, w, params)
    assert total.item() == pytest.approx(expected, rel=1e-12)
    assert total.item() == pytest.approx(sum(p.item() for p in parts.values()), rel=1e-12)


def test_bridge_branch_has_no_classifier():
    emb, y, protos, params = _batch(2)
    w = replace(ZERO, b_sem=1.0)
    a = total_loss(emb, y, protos, w, params)[0].item()
    b = total_loss(emb, y, protos, w, {**params, "cls_b/w": np.ones((4, 3))})[0].item()
    assert a == b


@pytest.mark.parametrize("name", [k for k in asdict(LossWeights()) if not k.startswith("tau")])
def test_total_is_linear_in_each_weight(name):
    emb, y, protos, params = _batch(3)
    base = LossWeights()
    f = lambda v: total_loss(emb, y, protos, replace(base, **{name: v}), params)[0].item()  # noqa: E731
    f0, f1, f3 = f(0.0), f(1.0), f(3.0)
    assert f3 - f0 == pytest.approx(3 * (f1 - f0), rel=1e-9, abs=1e-12)


def test_weights_validation():
    with pytest.raises(PoseBridgeError):
        LossWeights(s_cls=-1.0)
    with pytest.raises(PoseBridgeError):
        LossWeights(tau_d=0.0)


def test_loss_gradchecks():
    emb, y, protos, params = _batch(4)
    zs, zp, zb = (t.value for t in emb)
    checks = [
        (lambda p: cls_loss(p["z"], y, p["w"], p["b"]), {"z": zs, "w": params["cls_s/w"], "b": params["cls_s/b"]}),
        (lambda p: sem_loss(p["z"], y, p["t"]), {"z": zs, "t": protos}),
        (lambda p: supcon_loss(p["z"], y, 0.3), {"z": zs}),
        (lambda p: align_loss(p["z"], zp, p["t"]), {"z": zs, "t": protos}),
        (lambda p: total_loss(EmbeddingTriple(p["zs"], zp, p["zb"]), y, protos, LossWeights(tau_supcon=0.3), p)[0],
         {"zs": zs, "zb": zb, **params}),
    ]
    for fn, p in checks:
        rep = grad_check(fn, p)
        assert rep.passed, rep.summary()
