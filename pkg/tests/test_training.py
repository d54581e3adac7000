import math

import numpy as np
import pytest

from oracles import finite_difference_check
from smallmodel import loss_closure, tiny_problem
from unibev import training
from unibev.training import (AdamState, LossConfig, NonFiniteLossError, TrainConfig,
                             adam_step, weighted_cross_entropy)


def test_cross_entropy_limits():
    labels = np.array([[0, 1], [2, 1]])
    logits = np.eye(3)[labels] * 1000.0
    loss, _ = weighted_cross_entropy(logits, labels, np.ones(3))
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _ = weighted_cross_entropy(np.zeros((2, 2, 3)), np.ones((2, 2), int), np.ones(3))
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(ValueError):
        weighted_cross_entropy(np.zeros((2, 2, 3)), np.full((2, 2), 3), np.ones(3))


def test_cross_entropy_weights_and_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 4, 3))
    labels = rng.integers(0, 3, size=(4, 4))
    w = LossConfig(3).class_weights()
    assert w.tolist() == [0.4, 1.0, 1.0]
    loss, grad = weighted_cross_entropy(logits, labels, w)
    # direct definition, one pixel at a time
    ref = 0.0
    for idx in np.ndindex(4, 4):
        z = logits[idx]
        ref += w[labels[idx]] * -(z[labels[idx]] - np.log(np.exp(z).sum()))
    assert loss == pytest.approx(ref / 16, abs=1e-12)
    h = 1e-6
    for idx in np.ndindex(*logits.shape):
        old = logits[idx]
        logits[idx] = old + h
        lp, _ = weighted_cross_entropy(logits, labels, w)
        logits[idx] = old - h
        lm, _ = weighted_cross_entropy(logits, labels, w)
        logits[idx] = old
        num = (lp - lm) / (2 * h)
        assert abs(num - grad[idx]) <= 1e-5 * max(abs(num), abs(grad[idx]), 1e-6)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(2, background_weight=0.0)
    assert LossConfig(3, background_weight=1.0).class_weights().tolist() == [1.0, 1.0, 1.0]


def test_train_config_validation():
    assert TrainConfig().learning_rate == 2e-4 and TrainConfig().weight_decay == 1e-4
    with pytest.raises(ValueError):
        TrainConfig(p_train=-1)
    with pytest.raises(ValueError):
        TrainConfig(fusion_mode="warp")


@pytest.mark.parametrize("mode", ["unified", "no_temporal"])
def test_full_model_gradient_check(mode):
    frame, cfg, params = tiny_problem(seed=1, layers=1)
    w = np.array([0.4, 1.0])
    _, grads = training.loss_and_grads(params, cfg, [frame], 2, w, mode)
    assert set(grads) == set(params)
    worst, checked = finite_difference_check(loss_closure(frame, cfg, params, 2, mode), params,
                                             grads, np.random.default_rng(2), per_tensor=8)
    assert max(worst.values()) <= 1e-4
    assert all(checked[k] > 0 for k in params if grads[k].any())


def test_zero_upstream_and_batch_linearity():
    frame, cfg, params = tiny_problem(seed=3, layers=1)
    images, plan = frame.window(2)
    logits, cache = training.model_forward(params, cfg, images, plan)
    zero = training.model_backward(params, cfg, np.zeros_like(logits), cache)
    assert all(not v.any() for v in zero.values())
    w = np.array([0.4, 1.0])
    l1, g1 = training.loss_and_grads(params, cfg, [frame], 2, w)
    l2, g2 = training.loss_and_grads(params, cfg, [frame, frame], 2, w)
    assert l2 == 2 * l1
    for k in g1:
        np.testing.assert_array_equal(g2[k], 2 * g1[k])


def test_adam_closed_forms():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    g = {"a": np.array([0.5, -0.25, 0.0])}
    q = {"a": p["a"].copy()}
    adam_step(q, {"a": np.zeros(3)}, AdamState(), 0.1, 0.0)
    np.testing.assert_array_equal(q["a"], p["a"])
    q = {"a": p["a"].copy()}
    adam_step(q, g, AdamState(), 1e-3, 0.0)
    # first step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = p["a"] - 1e-3 * g["a"] / (np.abs(g["a"]) + 1e-8)
    np.testing.assert_allclose(q["a"], expected, rtol=0, atol=1e-15)
    q = {"a": p["a"].copy()}
    adam_step(q, {"a": np.zeros(3)}, AdamState(), 0.1, 0.01)
    np.testing.assert_allclose(q["a"], p["a"] * (1 - 0.1 * 0.01), atol=1e-15)


def test_adam_second_step_matches_formula():
    rng = np.random.default_rng(4)
    p0 = rng.normal(size=5)
    g1, g2 = rng.normal(size=5), rng.normal(size=5)
    lr, wd, b1, b2, eps = 1e-2, 1e-2, 0.9, 0.999, 1e-8
    q = {"a": p0.copy()}
    st = AdamState()
    adam_step(q, {"a": g1}, st, lr, wd)
    adam_step(q, {"a": g2}, st, lr, wd)
    x = p0.copy()
    m = v = np.zeros(5)
    for t, g in ((1, g1), (2, g2)):
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(q["a"], x, atol=1e-14)
    assert st.step == 2


def test_train_loop_determinism_zero_epochs_and_disentangled_eval():
    frame, cfg, _ = tiny_problem(seed=5, layers=1, self_regression=False)
    init = training.init_model(cfg, 0)
    tc0 = TrainConfig(p_train=1, p_infer=2, epochs=0, seed=0, learning_rate=1e-3)
    res0 = training.train_loop([frame], cfg, tc0, LossConfig())
    for k in init:
        np.testing.assert_array_equal(res0.params[k], init[k])
    tc = TrainConfig(p_train=1, p_infer=2, epochs=2, lr_drop_epoch=1, seed=0,
                     learning_rate=1e-3)
    a = training.train_loop([frame], cfg, tc, LossConfig(), eval_frames=[frame])
    b = training.train_loop([frame], cfg, tc, LossConfig(), eval_frames=[frame])
    assert a.losses == b.losses
    assert [r["lr"] for r in a.record] == [1e-3, pytest.approx(1e-4)]
    assert all("miou" in r for r in a.record)
    # trained at depth 1, evaluated at depth 2
    assert training.predict(a.params, cfg, frame, 2).shape == frame.labels.shape


def test_non_finite_loss_is_reported_with_step():
    frame, cfg, params = tiny_problem(seed=6, layers=1)
    params["head.b"][:] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        training.train_loop([frame], cfg, TrainConfig(epochs=1), LossConfig(), params=params)
    assert err.value.step == 0


def test_loss_decreases_on_a_standard_scene():
    from unibev import evalkit, simulator
    setting = evalkit.get_setting("desk")
    params = simulator.SceneParams(layout="straight", n_steps=3, image_size=(32, 64))
    frames = simulator.make_dataset([0, 1], setting, params, history=1, steps=[1, 2])
    cfg = training.FusionConfig(grid=setting.bev_grid(), channels=8, layers=1)
    tc = TrainConfig(p_train=1, p_infer=1, epochs=50, lr_drop_epoch=50, learning_rate=3e-3)
    res = training.train_loop(frames, cfg, tc, LossConfig())
    assert len(res.losses) == 200
    assert np.mean(res.losses[-4:]) < 0.7 * np.mean(res.losses[:4])


def test_checkpoint_roundtrip(tmp_path):
    frame, cfg, params = tiny_problem(seed=7, layers=1)
    training.save_checkpoint(tmp_path, params, cfg, [{"epoch": 0, "loss": 1.0}], {"k": 1})
    back, cfg2, meta = training.load_checkpoint(tmp_path)
    assert cfg2 == cfg
    assert meta["record"][0]["loss"] == 1.0 and meta["k"] == 1
    for k in params:
        np.testing.assert_allclose(back[k], params[k].astype(np.float32), atol=0)
