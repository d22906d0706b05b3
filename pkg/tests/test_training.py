import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdreamer.mome import EEG, EMG, MIX
from sdreamer.models import EpochModelConfig, EpochSDreamer
from sdreamer.signal_prep import UNLABELED, build_dataset, synth_generate
from sdreamer.tensor import Tape, Tensor, backward
from sdreamer.training import (
    DistillConfig,
    OptimState,
    TrainConfig,
    TrainingError,
    adamw_step,
    ce_loss,
    confusion_matrix,
    evaluate,
    report_from_confusion,
    sd_loss,
    softmax_tau,
    total_loss,
    train,
)


def scalar_adamw(p, grad_fn, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float reference, written independently of the vectorised optimizer."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(p)
    return out


# ------------------------------------------------------------------ softmax

def test_softmax_tau_examples():
    np.testing.assert_allclose(softmax_tau([0, 0, 0], 5.0), [1 / 3] * 3, rtol=1e-15)
    assert np.all(np.abs(softmax_tau([2, 0, 0], 1000.0) - 1 / 3) < 1e-3)
    np.testing.assert_allclose(softmax_tau([math.log(2), 0], 1.0), [2 / 3, 1 / 3], rtol=1e-15)
    with pytest.raises(ValueError):
        softmax_tau([1, 2], 0.0)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(0.1, 10))
def test_softmax_tau_is_distribution(z, tau):
    p = softmax_tau(z, tau)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


# ------------------------------------------------------------------ sd loss

def test_sd_loss_hand_example():
    got = float(sd_loss([[math.log(2), 0]], [[0, 0]], 1.0, [True]).data)
    expected = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
    assert abs(got - expected) < 1e-14
    assert abs(got - 0.0566) < 1e-4


def test_sd_loss_identical_is_zero(rng):
    z = rng.standard_normal((10, 3))
    assert abs(float(sd_loss(z, z, 3.0, np.ones(10, bool)).data)) < 1e-12


def test_sd_loss_nonnegative(rng):
    for _ in range(200):
        zs, zt = rng.standard_normal((4, 3)) * 5, rng.standard_normal((4, 3)) * 5
        assert float(sd_loss(zs, zt, rng.uniform(0.2, 5), np.ones(4, bool)).data) >= 0.0


def test_sd_loss_options(rng):
    zs, zt = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    mask = np.ones(5, bool)
    base = float(sd_loss(zs, zt, 3.0, mask).data)
    scaled = float(sd_loss(zs, zt, 3.0, mask, scale_by_tau_sq=True).data)
    assert abs(scaled - 9 * base) < 1e-12
    rev = float(sd_loss(zs, zt, 3.0, mask, teacher_first=True).data)
    assert abs(rev - float(sd_loss(zt, zs, 3.0, mask).data)) < 1e-12


def test_sd_loss_all_masked_warns(caplog):
    out = sd_loss(np.zeros((2, 3)), np.ones((2, 3)), 1.0, [False, False])
    assert float(out.data) == 0.0
    assert "masked" in caplog.text


def test_sd_loss_errors():
    with pytest.raises(ValueError):
        sd_loss(np.zeros((2, 3)), np.zeros((3, 3)), 1.0, [True, True])
    with pytest.raises(ValueError):
        sd_loss(np.zeros((2, 3)), np.zeros((2, 3)), 0.0, [True, True])


def teacher_grads(zs_data, zt_data, labels, with_sd, detach=True):
    zs = Tensor(zs_data.copy(), requires_grad=True)
    zt = Tensor(zt_data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = ce_loss(zt, labels)
        if with_sd:
            loss = loss + sd_loss(zs, zt, 2.0, np.ones(len(labels), bool), detach_teacher=detach)
    backward(loss, tape)
    return zs.grad, zt.grad


def test_detached_teacher_gets_no_sd_gradient(rng):
    zs, zt = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, 4)
    _, ce_only = teacher_grads(zs, zt, labels, with_sd=False)
    student, both = teacher_grads(zs, zt, labels, with_sd=True)
    assert both.tobytes() == ce_only.tobytes()
    assert np.any(student != 0)
    _, attached = teacher_grads(zs, zt, labels, with_sd=True, detach=False)
    assert np.abs(attached - ce_only).max() > 1e-6


# ------------------------------------------------------------------ ce loss

def test_ce_loss_examples():
    assert float(ce_loss([[1e9, 0, 0]], [0]).data) < 1e-12
    assert abs(float(ce_loss([[0.3, 0.3, 0.3]], [2]).data) - math.log(3)) < 1e-14
    z = np.array([[1.0, 2.0, 0.5], [9.0, -3.0, 4.0]])
    single = float(ce_loss(z[:1], [1]).data)
    assert abs(float(ce_loss(z, [1, UNLABELED]).data) - single) < 1e-15
    with pytest.raises(ValueError):
        ce_loss(z, [UNLABELED, UNLABELED])


def test_masked_duplicates_leave_losses_unchanged(rng):
    zm, ze = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, 6)
    mask = np.ones(6, bool)
    ce = float(ce_loss(zm, labels, mask).data)
    sd = float(sd_loss(ze, zm, 1.0, mask).data)
    zm2 = np.concatenate([zm, rng.standard_normal((6, 3))])
    ze2 = np.concatenate([ze, rng.standard_normal((6, 3))])
    labels2 = np.concatenate([labels, np.full(6, UNLABELED)])
    mask2 = labels2 != UNLABELED
    assert abs(float(ce_loss(zm2, labels2, mask2).data) - ce) < 1e-15
    assert abs(float(sd_loss(ze2, zm2, 1.0, mask2).data) - sd) < 1e-15


# --------------------------------------------------------------- total loss

def test_total_loss_examples():
    total, parts = total_loss(1.0, 0.2, 0.4, DistillConfig(alpha=0.33))
    assert abs(total - 0.769) < 1e-12
    assert parts.total == total
    assert total_loss(1.3, 0.2, 0.4, DistillConfig(alpha=0.0))[0] == 1.3
    assert total_loss(1.3, 0.2, 0.4, DistillConfig(alpha=1.0))[0] == pytest.approx(0.3, abs=1e-15)


def test_total_loss_tensor_inputs():
    total, parts = total_loss(Tensor(1.0), Tensor(0.2), Tensor(0.4), DistillConfig())
    assert isinstance(total, Tensor)
    assert abs(parts.total - 0.769) < 1e-12


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        DistillConfig(tau_emg=0)


# -------------------------------------------------------------------- adamw

def test_adamw_zero_grad_no_decay_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adamw_step([("p", p)], OptimState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_pure_decay():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.zeros(1)
    adamw_step([("p", p)], OptimState(lr=0.1, weight_decay=0.1))
    assert abs(p.data[0] - 0.99) < 1e-15


def test_adamw_matches_scalar_oracle_single_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = 2 * p.data
    adamw_step([("p", p)], OptimState(lr=1e-3, weight_decay=1e-4))
    expected = scalar_adamw(1.0, lambda x: 2 * x, 1, 1e-3, 1e-4)[-1]
    assert abs(p.data[0] - expected) < 1e-12


@settings(max_examples=25, deadline=None)
@given(
    st.floats(-5, 5),
    st.floats(0.1, 4),
    st.floats(-3, 3),
    st.floats(1e-4, 1e-1),
    st.floats(0, 0.1),
)
def test_adamw_trajectory_matches_scalar_oracle(p0, a, c, lr, wd):
    grad = lambda x: 2 * a * (x - c)  # f(x) = a (x - c)^2
    expected = scalar_adamw(p0, grad, 100, lr, wd)
    p = Tensor(np.array([p0]), requires_grad=True)
    state = OptimState(lr=lr, weight_decay=wd)
    for t in range(100):
        p.grad = grad(p.data)
        adamw_step([("p", p)], state)
        assert abs(p.data[0] - expected[t]) <= 1e-12 * max(1.0, abs(expected[t]))


def test_adamw_nonfinite_gradient_aborts():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    a.grad, b.grad = np.array([0.5]), np.array([np.nan])
    state = OptimState()
    with pytest.raises(FloatingPointError, match="'b'"):
        adamw_step([("a", a), ("b", b)], state)
    assert a.data[0] == 1.0 and state.step == 0


# ------------------------------------------------------------------ metrics

def brute_force_metrics(pred, truth):
    labeled = [(p, t) for p, t in zip(pred, truth) if t != UNLABELED]
    acc = sum(p == t for p, t in labeled) / len(labeled)
    f1s = []
    for c in range(3):
        tp = sum(p == c and t == c for p, t in labeled)
        fp = sum(p == c and t != c for p, t in labeled)
        fn = sum(p != c and t == c for p, t in labeled)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return acc, sum(f1s) / 3


def test_worked_confusion_example():
    rep = report_from_confusion([[5, 0, 0], [0, 0, 5], [0, 0, 5]])
    assert abs(rep.accuracy - 10 / 15) < 1e-15
    np.testing.assert_allclose(rep.f1, [1.0, 0.0, 2 / 3], atol=1e-15)
    assert abs(rep.macro_f1 - 5 / 9) < 1e-15


def test_all_class_zero_on_balanced_truth():
    truth = np.repeat([0, 1, 2], 4)
    rep = report_from_confusion(confusion_matrix(np.zeros(12, int), truth))
    assert abs(rep.accuracy - 1 / 3) < 1e-15
    assert abs(rep.macro_f1 - 1 / 6) < 1e-15


def test_perfect_and_absent_classes():
    rep = report_from_confusion(confusion_matrix([0, 1, 1], [0, 1, 1]))
    assert rep.accuracy == 1.0
    assert rep.absent_classes == ["REM"]
    assert abs(rep.macro_f1 - 2 / 3) < 1e-15
    with pytest.raises(ValueError):
        report_from_confusion(np.zeros((3, 3)))


def test_metrics_match_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        pred = rng.integers(0, 3, n)
        truth = rng.integers(-1, 3, n)
        truth[0] = max(truth[0], 0)
        rep = report_from_confusion(confusion_matrix(pred, truth))
        acc, f1 = brute_force_metrics(pred, truth)
        assert abs(rep.accuracy - acc) < 1e-12 and abs(rep.macro_f1 - f1) < 1e-12


def test_report_serialises():
    rep = report_from_confusion([[2, 1, 0], [0, 3, 0], [1, 0, 2]], pathway="mix")
    assert json.loads(rep.to_json())["confusion"] == [[2, 1, 0], [0, 3, 0], [1, 0, 2]]
    assert "macro_f1" in rep.format()


# ----------------------------------------------------------------- training

def tiny_setup(seed=0, unlabeled_fraction=0.0):
    from sdreamer.signal_prep import SynthConfig

    cfg = SynthConfig(sample_rate_hz=16, unlabeled_fraction=unlabeled_fraction)
    recs = synth_generate(3, 40, seed=seed, config=cfg)
    tr = build_dataset(recs[:2], 8)
    te = build_dataset(recs[2:], 8)
    model = EpochSDreamer(
        EpochModelConfig(n_layers=2, mix_start_layer=2, dim=8, patch_width=8, sample_rate_hz=16, heads=2, ffn_dim=16),
        seed=seed,
    )
    return model, tr, te


def test_train_is_deterministic(tmp_path):
    cfg = TrainConfig(steps=6, batch_size=16, micro_batch=5, eval_interval=3, log_wall_time=False)
    runs = []
    for i in range(2):
        model, tr, te = tiny_setup()
        res = train(model, tr, te, DistillConfig(), cfg, seed=4, log_path=tmp_path / f"log{i}.jsonl")
        runs.append((res, [p.data.copy() for p in model.parameters()]))
    assert (tmp_path / "log0.jsonl").read_bytes() == (tmp_path / "log1.jsonl").read_bytes()
    for a, b in zip(runs[0][1], runs[1][1]):
        assert a.tobytes() == b.tobytes()
    assert [e["step"] for e in runs[0][0].evals] == [3, 6]


def test_micro_batching_matches_full_batch():
    grads = []
    for micro in (16, 3):
        model, tr, _ = tiny_setup()
        train(model, tr, None, DistillConfig(), TrainConfig(steps=1, batch_size=16, micro_batch=micro), seed=1)
        grads.append(np.concatenate([p.data.ravel() for p in model.parameters()]))
    np.testing.assert_allclose(grads[0], grads[1], rtol=0, atol=1e-12)


def test_zero_learning_rate_keeps_loss_constant():
    model, tr, _ = tiny_setup()
    cfg = TrainConfig(steps=4, batch_size=len(tr), micro_batch=64, lr=0.0)
    res = train(model, tr, None, DistillConfig(), cfg, seed=0)
    totals = {r["total"] for r in res.log}
    assert len(totals) == 1


def test_alpha_zero_total_equals_ce():
    model, tr, _ = tiny_setup()
    res = train(model, tr, None, DistillConfig(alpha=0.0), TrainConfig(steps=2, batch_size=8), seed=0)
    for r in res.log:
        assert r["total"] == r["ce"] and r["sd_eeg"] > 0


def test_sd_switches_zero_terms():
    model, tr, _ = tiny_setup()
    res = train(model, tr, None, DistillConfig(sd_eeg_on=False), TrainConfig(steps=1, batch_size=8), seed=0)
    assert res.log[0]["sd_eeg"] == 0.0 and res.log[0]["sd_emg"] > 0


def test_unlabeled_epochs_are_tolerated():
    model, tr, te = tiny_setup(unlabeled_fraction=0.3)
    res = train(model, tr, te, DistillConfig(), TrainConfig(steps=2, batch_size=16), seed=0)
    rep = res.final_eval()
    assert rep.n_masked > 0 and rep.n_labeled + rep.n_masked == len(te)


def test_empty_split_rejected():
    model, tr, te = tiny_setup()
    from dataclasses import replace

    empty = replace(tr, x=tr.x[:0], labels=tr.labels[:0], subjects=tr.subjects[:0], positions=tr.positions[:0])
    with pytest.raises(TrainingError, match="training split"):
        train(model, empty, te, DistillConfig(), TrainConfig(steps=1))
    with pytest.raises(TrainingError, match="evaluation split"):
        train(model, tr, empty, DistillConfig(), TrainConfig(steps=1))


def test_checkpoint_written(tmp_path):
    from sdreamer.models import load_checkpoint

    model, tr, te = tiny_setup()
    train(model, tr, te, DistillConfig(), TrainConfig(steps=2, batch_size=8), seed=0, checkpoint_path=tmp_path / "c.sdrm")
    loaded, header = load_checkpoint(tmp_path / "c.sdrm")
    assert header["step"] == 2 and "rng_state" in header


def test_evaluate_pathways():
    model, _, te = tiny_setup()
    for p in (EEG, EMG, MIX):
        rep = evaluate(model, te, p)
        assert rep.pathway == p and rep.n_labeled == len(te)
