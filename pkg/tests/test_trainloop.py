import math

import numpy as np
import pytest

from deskdet import autodiff as ad
from deskdet import trainloop
from deskdet.cascade import POSITIVE, CascadeConfig, build_targets, flatten_outputs, hybrid_loss
from deskdet.netarch import Detector, ModelConfig
from deskdet.synthdata import generate
from deskdet.trainloop import (TrainConfig, TrainingDiverged, clip_grad_norm, effective_configs, learning_rate,
                               sgd_step, train)

from helpers import iou_oracle

OVERFIT_EPOCHS = 100
OFF = dict(use_str=False, use_stc=False, use_sml=False, use_fsm=False, use_rfe=False)


# -- schedule ---------------------------------------------------------------------------

def test_lr_endpoints():
    cfg = TrainConfig()
    assert learning_rate(0, 50, cfg) == 3.125e-4
    assert learning_rate(2 * 50, 50, cfg) == 1e-2


def test_lr_linear_midpoint():
    cfg = TrainConfig(warmup_epochs=2)
    assert learning_rate(50, 50, cfg) == pytest.approx((3.125e-4 + 1e-2) / 2, rel=1e-12)


def test_lr_step_decay():
    cfg = TrainConfig(epochs=30, milestones=(20, 26))
    assert learning_rate(19 * 10, 10, cfg) == pytest.approx(1e-2)
    assert learning_rate(20 * 10, 10, cfg) == pytest.approx(1e-3)
    assert learning_rate(26 * 10 + 3, 10, cfg) == pytest.approx(1e-4)


def test_lr_monotone_warmup():
    cfg = TrainConfig()
    lrs = [learning_rate(s, 7, cfg) for s in range(14)]
    assert all(b > a for a, b in zip(lrs, lrs[1:]))


def test_schedule_ordering_enforced():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, milestones=(8, 12))
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, milestones=(4, 8), epochs=10)
    TrainConfig(epochs=0)


# -- SGD ------------------------------------------------------------------------------------

def test_sgd_zero_grad_no_decay_is_noop():
    p = ad.parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.zeros(3)
    sgd_step([p], [None], 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_sgd_plain_step():
    with ad.precision(np.float64):
        p = ad.parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.5, 0.25])
        sgd_step([p], [None], 0.1, momentum=0.0, weight_decay=1e-2)
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * (0.5 + 0.01), -2.0 - 0.1 * (0.25 - 0.02)])


def test_sgd_two_momentum_steps_vs_recurrence():
    rng = np.random.default_rng(0)
    for _ in range(20):
        with ad.precision(np.float64):
            w0 = rng.normal(size=5)
            g1, g2 = rng.normal(size=5), rng.normal(size=5)
            lr, mu, wd = 0.05, 0.9, 1e-4
            p = ad.parameter(w0.copy())
            vel = [None]
            p.grad = g1
            sgd_step([p], vel, lr, mu, wd)
            p.grad = g2
            sgd_step([p], vel, lr, mu, wd)
        v1 = g1 + wd * w0
        w1 = w0 - lr * v1
        v2 = mu * v1 + g2 + wd * w1
        w2 = w1 - lr * v2
        np.testing.assert_allclose(p.data, w2, atol=1e-7)


def test_sgd_skips_parameters_without_grad():
    p = ad.parameter(np.ones(2))
    sgd_step([p], [None], 1.0)
    np.testing.assert_array_equal(p.data, 1.0)


def test_clip_grad_norm_matches_rescaled_concatenation():
    rng = np.random.default_rng(3)
    for _ in range(50):
        with ad.precision(np.float64):
            shapes = [(3,), (2, 4), (5,)]
            params = [ad.parameter(np.zeros(s)) for s in shapes]
            grads = [rng.normal(scale=rng.uniform(0.1, 5), size=s) for s in shapes]
            for p, g in zip(params, grads):
                p.grad = g.copy()
            flat = np.concatenate([g.ravel() for g in grads])
            limit = rng.uniform(0.5, 10)
            norm = clip_grad_norm(params, limit)
        assert norm == pytest.approx(np.linalg.norm(flat), rel=1e-12)
        c = min(1.0, limit / np.linalg.norm(flat))
        for p, g in zip(params, grads):
            np.testing.assert_allclose(p.grad, g * c, rtol=1e-12)
        assert np.sqrt(sum((p.grad ** 2).sum() for p in params)) <= limit * (1 + 1e-12)


def test_clip_disabled_and_missing_grads():
    p, q = ad.parameter(np.ones(2)), ad.parameter(np.ones(2))
    p.grad = np.full(2, 100.0)
    clip_grad_norm([p, q], 0.0)
    np.testing.assert_array_equal(p.grad, 100.0)
    assert q.grad is None
    with pytest.raises(ValueError):
        TrainConfig(grad_clip=-1.0)


# -- toggles ----------------------------------------------------------------------------

def test_effective_configs_apply_toggles():
    m, c = effective_configs(ModelConfig(), CascadeConfig(), TrainConfig(**OFF))
    assert not m.rfe_enabled and not m.fsm_enabled
    assert c.str_levels == () and c.stc_levels == () and not c.sml_enabled and not c.fsm_enabled
    m, c = effective_configs(ModelConfig(), CascadeConfig(), TrainConfig())
    assert c.str_levels == (3, 4) and c.stc_levels == (2, 3)


def test_fsm_toggle_changes_backbone_gradients():
    sc = generate(0, 2, size=32)
    images, gts = np.stack([s.image for s in sc]), [s.gts for s in sc]
    grads = []
    for fsm in (True, False):
        m = Detector(ModelConfig(fsm_channels=8), seed=0)
        loss, _, _ = hybrid_loss(m, images, gts, CascadeConfig(fsm_enabled=fsm, fsm_proposals=16))
        loss.backward()
        grads.append(dict((n, p.grad) for n, p in m.named_parameters()))
    backbone = [n for n in grads[0] if n.startswith(("stem", "C", "P"))]
    assert any(not np.array_equal(grads[0][n], grads[1][n]) for n in backbone)
    assert grads[1]["fsm.pred.weight"] is None


# -- training runs ------------------------------------------------------------------------

def test_zero_epochs_checkpoint_is_initialisation(tmp_path):
    res = train(generate(0, 2, size=32), ModelConfig(), CascadeConfig(), TrainConfig(epochs=0, **OFF),
                out_dir=tmp_path)
    init = Detector(ModelConfig(rfe_enabled=False, fsm_enabled=False), seed=0).state_dict()
    saved = ad.load_checkpoint(res.checkpoint)
    assert saved.keys() == init.keys()
    for k in init:
        np.testing.assert_array_equal(saved[k], init[k])


def _tiny(tmp_path, name, **kw):
    cfg = TrainConfig(epochs=3, warmup_epochs=0, milestones=(1, 2), batch_size=2, **kw)
    return train(generate(1, 4, size=32), ModelConfig(fsm_channels=8), CascadeConfig(fsm_proposals=8), cfg,
                 out_dir=tmp_path / name)


def test_deterministic_runs(tmp_path):
    a = _tiny(tmp_path, "a")
    b = _tiny(tmp_path, "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert (tmp_path / "a" / "metrics.log").read_text() == (tmp_path / "b" / "metrics.log").read_text()
    c = _tiny(tmp_path, "c", seed=1)
    assert c.checkpoint.read_bytes() != a.checkpoint.read_bytes()


def test_metrics_log_layout(tmp_path):
    res = _tiny(tmp_path, "m")
    lines = (tmp_path / "m" / "metrics.log").read_text().splitlines()
    assert lines[0] == "epoch, step, lr, str_loss, stc_loss, fsm_loss, total"
    assert len(lines) == 4
    for k, line in enumerate(lines[1:]):
        f = [float(v) for v in line.split(",")]
        assert f[0] == k and f[1] == 2 * (k + 1)
        assert f[6] == pytest.approx(f[3] + f[4] + f[5], abs=2e-6)
        assert all(v >= 0 for v in f[3:])
    assert [r.lr for r in res.history] == pytest.approx([1e-2, 1e-3, 1e-4])


def test_divergence_reports_step(monkeypatch):
    calls = {"n": 0}
    real = trainloop.hybrid_loss

    def flaky(*a, **kw):
        loss, rep, t = real(*a, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            loss = ad.mul(loss, float("nan"))
        return loss, rep, t

    monkeypatch.setattr(trainloop, "hybrid_loss", flaky)
    cfg = TrainConfig(epochs=3, warmup_epochs=0, milestones=(1, 2), batch_size=2, **OFF)
    with pytest.raises(TrainingDiverged) as exc:
        train(generate(1, 4, size=32), ModelConfig(), CascadeConfig(), cfg)
    assert exc.value.step == 2 and "step 2" in str(exc.value)


def test_overfit_small_set_all_modules():
    scenes = generate(5, 10, size=32)
    cfg = TrainConfig(epochs=OVERFIT_EPOCHS, warmup_epochs=1, milestones=(OVERFIT_EPOCHS - 2, OVERFIT_EPOCHS - 1),
                      batch_size=10, augment=False)
    res = train(scenes, ModelConfig(fsm_channels=16), CascadeConfig(fsm_proposals=32), cfg)
    first, last = res.step_losses[0], res.step_losses[-1]
    assert math.isfinite(last)
    assert last < 0.05 * first, (first, last)

    # on the converged model, refinement moves step-1 positives closer to their gts
    _, ccfg = effective_configs(ModelConfig(), CascadeConfig(), cfg)
    images, gts = np.stack([s.image for s in scenes]), [s.gts for s in scenes]
    result = res.model.forward(images, ccfg.stc_levels, ccfg.str_levels)
    targets = build_targets(result, flatten_outputs(result), gts, ccfg)
    on_str = np.isin(targets.states[0].level, ccfg.str_levels)
    before, after = [], []
    for a, st, g in zip(targets.step1, targets.states, gts):
        pos = np.nonzero((a.labels == POSITIVE) & on_str)[0]
        for k in pos:
            before.append(iou_oracle(st.anchors[k], g[a.gt_index[k]]))
            after.append(iou_oracle(st.refined[k], g[a.gt_index[k]]))
    assert before
    assert np.mean(after) >= np.mean(before) - 1e-6, (np.mean(before), np.mean(after))

