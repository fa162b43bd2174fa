import math

import numpy as np
import pytest

from tlab.blocks import ModelConfig
from tlab.init import build_model
from tlab.rng import stream
from tlab.trainer import (OptimConfig, OptimKind, OptimState, SyntheticTask, adam_step, load_checkpoint,
                          lr_schedule, resume, save_checkpoint, sgd_step, train)


def small(**kw):
    base = dict(variant="preln", n_enc=1, n_dec=1, d_model=8, n_heads=2, d_ff=16,
                src_vocab=8, tgt_vocab=8, max_len=16, dropout=0.1)
    return ModelConfig(**{**base, **kw})


TASK = SyntheticTask(vocab=8, min_len=3, max_len=5, batch_size=4, seed=1)


# -- schedule ----------------------------------------------------------------

def test_schedule_examples():
    cfg = OptimConfig(lr_max=1e-3, warmup_steps=8000)
    assert lr_schedule(8000, cfg) == 1e-3
    assert lr_schedule(32000, cfg) == pytest.approx(5e-4, rel=1e-15)
    assert lr_schedule(1, cfg) == pytest.approx(1.25e-7, rel=1e-15)
    assert lr_schedule(7, OptimConfig(lr_max=0.2, warmup_steps=0)) == 0.2
    with pytest.raises(ValueError):
        lr_schedule(0, cfg)


def test_schedule_continuous_then_decaying():
    cfg = OptimConfig(lr_max=1.0, warmup_steps=100)
    assert lr_schedule(100, cfg) == pytest.approx(lr_schedule(101, cfg), rel=0.01)
    tail = [lr_schedule(t, cfg) for t in range(100, 400)]
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_optim_defaults():
    cfg = OptimConfig()
    assert (cfg.beta1, cfg.beta2, cfg.warmup_steps) == (0.9, 0.98, 8000)


# -- optimizers --------------------------------------------------------------

def test_sgd_examples():
    assert sgd_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, 0.1)["w"] == pytest.approx(0.8, abs=1e-15)
    p = {"w": np.arange(3.0)}
    assert np.array_equal(sgd_step(p, {"w": np.zeros(3)}, 0.5)["w"], p["w"])


def test_sgd_matches_loop():
    rng = stream(0, "sgd")
    p, g = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    out = sgd_step({"w": p}, {"w": g}, 0.03)["w"]
    ref = np.empty_like(p)
    for i in range(4):
        for j in range(5):
            ref[i, j] = p[i, j] - 0.03 * g[i, j]
    assert np.max(np.abs(out - ref)) < 1e-15


def _adam(p, grads, lr, cfg):
    state = OptimState.zeros_like(p)
    for g in grads:
        p, state = adam_step(p, g, state, lr, cfg)
    return p, state


def test_adam_first_step_is_sign_step():
    g = {"w": np.array([3.0, -0.002, 50.0])}
    p, _ = _adam({"w": np.zeros(3)}, [g], 1e-2, OptimConfig())
    assert np.allclose(p["w"], -1e-2 * np.sign(g["w"]), rtol=1e-5)


def test_adam_zero_gradient_never_moves():
    p0 = {"w": np.array([1.0, -2.0])}
    p, state = _adam(p0, [{"w": np.zeros(2)}] * 5, 1e-2, OptimConfig())
    assert np.array_equal(p["w"], p0["w"]) and state.t == 5


def test_adam_three_scalar_steps_by_hand():
    cfg = OptimConfig(beta1=0.9, beta2=0.98, eps_adam=1e-8)
    gs, lr = [0.5, -1.0, 2.0], 0.01
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(gs, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.98 ** t)) + 1e-8)
    p, _ = _adam({"w": np.array(1.0)}, [{"w": np.array(g)} for g in gs], lr, cfg)
    assert abs(float(p["w"]) - w) < 1e-12


def test_adam_update_bounded_by_lr_at_any_scale():
    rng = stream(0, "adam")
    for scale in (1e-6, 1.0, 1e6):
        # occasional 10x spikes probe the worst case of the moment ratio
        grads = [{"w": rng.standard_normal(50) * scale * (10 if k % 17 == 0 else 1)} for k in range(100)]
        p0 = {"w": np.zeros(50)}
        p, state = p0, OptimState.zeros_like(p0)
        for g in grads:
            new, state = adam_step(p, g, state, 1e-3, OptimConfig())
            assert np.max(np.abs(new["w"] - p["w"])) <= 1e-3 * (1 + 1e-9)
            p = new


def test_adam_state_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, OptimState.zeros_like({"w": np.zeros(2)}), 1e-3,
                  OptimConfig())


# -- tasks -------------------------------------------------------------------

def test_task_targets_and_determinism():
    b = TASK.batch(3)
    assert np.array_equal(b.tgt_out, b.src) and np.all(b.tgt_in[:, 0] == 0)
    assert np.array_equal(b.tgt_in[:, 1:], b.src[:, :-1])
    assert np.array_equal(TASK.batch(3).src, b.src)
    r = SyntheticTask(kind="reverse", vocab=8, seed=1).batch(0)
    assert np.array_equal(r.tgt_out, r.src[:, ::-1])
    assert b.src.min() >= 1 and b.src.max() < 8


# -- training loop -----------------------------------------------------------

def test_zero_learning_rate_keeps_loss_constant_on_fixed_batch():
    model = build_model(small(dropout=0.0))
    fixed = SyntheticTask(vocab=8, min_len=4, max_len=4, batch_size=4, seed=1)
    fixed.batch = lambda k, batch_size=None, _b=fixed.batch(0): _b
    rec = train(model, fixed, OptimConfig(lr_max=0.0, warmup_steps=0), 5)
    assert np.all(rec.losses == rec.losses[0])


def test_training_is_bit_deterministic():
    runs = [train(build_model(small()), TASK, OptimConfig(lr_max=1e-3, warmup_steps=5), 12).losses
            for _ in range(2)]
    assert np.array_equal(runs[0], runs[1])


def test_loss_drops_on_copy():
    rec = train(build_model(small(dropout=0.0, d_model=16, d_ff=32)), TASK, OptimConfig(lr_max=3e-3, warmup_steps=20), 150)
    assert rec.losses[-10:].mean() < 0.8 * rec.losses[:10].mean()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = OptimConfig(lr_max=1e-3, warmup_steps=4)
    full = train(build_model(small()), TASK, cfg, 10)
    part = train(build_model(small()), TASK, cfg, 10, checkpoint_every=5, out_dir=tmp_path)
    assert len(part.checkpoints) == 2 and (tmp_path / "train_log.csv").exists()
    _, rest = resume(part.checkpoints[0], TASK, cfg, 10)
    assert np.array_equal(np.concatenate([part.losses[:5], rest.losses]), full.losses)


def test_checkpoint_round_trip_bytes(tmp_path):
    model = build_model(small())
    state = OptimState.zeros_like({k: t.data for k, t in model.trainable().items()})
    save_checkpoint(tmp_path / "a.bin", model, state, 7, OptimConfig())
    m2, s2, step = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(tmp_path / "b.bin", m2, s2, step, OptimConfig())
    assert step == 7 and (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_divergence_is_flagged():
    rec = train(build_model(small(variant="postln", dropout=0.0)), TASK, OptimConfig(lr_max=50.0, warmup_steps=0), 40)
    assert rec.diverged and rec.diverged_at is not None
    assert len(rec.steps) <= 40


def test_vocab_mismatch_rejected():
    with pytest.raises(ValueError):
        train(build_model(small(src_vocab=4, tgt_vocab=4)), TASK, OptimConfig(), 1)
