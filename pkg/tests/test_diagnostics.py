import csv

import numpy as np
import pytest

from tlab import diagnostics as dg
from tlab.blocks import ModelConfig, model_forward
from tlab.init import build_admin_model, build_model
from tlab.rng import stream
from tlab.trainer import OptimConfig, OptimKind, SyntheticTask, compute_grads


def cfg(**kw):
    base = dict(variant="postln", n_enc=3, n_dec=3, d_model=32, n_heads=4, d_ff=64,
                src_vocab=12, tgt_vocab=12, max_len=32, dropout=0.0)
    return ModelConfig(**{**base, **kw})


BATCH = SyntheticTask(vocab=12, min_len=10, max_len=10, batch_size=8, seed=5).batch(0)


# -- gradient norms ----------------------------------------------------------------

@pytest.mark.parametrize("variant", ["postln", "preln", "admin", "hybrid"])
def test_relative_norms_peak_at_one(variant):
    if variant == "admin":
        model, _ = build_admin_model(cfg(variant=variant), BATCH)
    else:
        model = build_model(cfg(variant=variant))
    rep = dg.grad_histogram(model, BATCH)
    assert max(r.rel for r in rep.rows) == 1.0
    assert len(rep.side("encoder")) == 6 and len(rep.side("decoder")) == 9


def test_postln_decoder_gradient_decays_downward():
    model = build_model(cfg(n_enc=6, n_dec=6, d_model=64, d_ff=256))
    rep = dg.grad_histogram(model, BATCH)
    dec = np.array([r.l2 for r in rep.side("decoder")])
    at_cross = [r.l2 for r in rep.side("decoder") if r.kind == "enc_att"]
    assert np.all(np.diff(at_cross) > 0)
    assert (dec[-1] / dec[0]) ** 2 >= 10.0
    rows = dg.vanishing_check(model, BATCH, "decoder", report=rep)
    assert all(r.ratio < 1 for r in rows if r.kind == "enc_att")
    assert dg.cumulative_decay(rep, "decoder") > 1


def test_preln_bottom_gradient_at_least_top():
    model = build_model(cfg(variant="preln", n_enc=6, n_dec=6, d_model=64, d_ff=256))
    rep = dg.grad_histogram(model, BATCH)
    for side in ("encoder", "decoder"):
        norms = [r.l2 for r in rep.side(side)]
        assert norms[0] >= norms[-1]


def test_hybrid_has_no_vanishing_verdict():
    model = build_model(cfg(variant="hybrid", n_enc=6, n_dec=6, d_model=64, d_ff=256))
    for side in ("encoder", "decoder"):
        assert all(r.verdict == "ok" for r in dg.vanishing_check(model, BATCH, side))


def test_seed_summary_quartiles():
    s = dg.SeedSummary.of([[1.0], [2.0], [3.0], [4.0], [5.0]])
    assert s.median[0] == 3.0 and s.q25[0] == 2.0 and s.q75[0] == 4.0


# -- dependency matrices -----------------------------------------------------------

@pytest.mark.parametrize("variant", ["postln", "preln", "admin"])
def test_renormalized_rows_are_unit(variant):
    if variant == "admin":
        model, _ = build_admin_model(cfg(variant=variant), BATCH)
    else:
        model = build_model(cfg(variant=variant))
    m = dg.estimate_beta(model, BATCH)
    assert np.allclose((m.beta ** 2).sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.triu(m.beta, 1) == 0)
    assert np.all((m.raw_row_sums[1:] > 0.7) & (m.raw_row_sums[1:] < 1.3))


def test_preln_beta_is_closed_form():
    model = build_model(cfg(variant="preln", n_dec=1))
    _, (enc, _) = model_forward(model, *BATCH)
    m = dg.beta_from_trace(enc, model.encoder)
    i = 4
    raw = np.sqrt(enc[i].var_a / enc[i].var_x)
    assert m.beta[i, i] == pytest.approx(raw / np.sqrt(m.raw_row_sums[i]), rel=1e-12)


def test_beta_rejects_zero_branch_input_variance():
    model = build_model(cfg(n_dec=1))
    _, (enc, _) = model_forward(model, *BATCH)
    enc[2].b.data[:] = 0.0
    with pytest.raises(ValueError):
        dg.beta_from_trace(enc, model.encoder)


def test_coefficient_of_variation():
    assert dg.coefficient_of_variation([2.0, 2.0, 2.0]) == 0.0
    assert dg.coefficient_of_variation([1.0, 3.0]) == pytest.approx(0.5)


# -- least squares -------------------------------------------------------------

def test_fit_collinear_and_constant():
    assert dg.fit_r2([(1, 3), (2, 5), (4, 9)])[2] == pytest.approx(1.0, abs=1e-15)
    slope, _, r2 = dg.fit_r2([(1, 2), (2, 2), (3, 2)])
    assert slope == 0.0 and r2 == 0.0
    with pytest.raises(ValueError):
        dg.fit_r2([(1, 2), (1, 3)])


def test_fit_matches_normal_equations():
    rng = stream(0, "fit")
    for transform in ("identity", "log"):
        x = rng.uniform(1, 50, size=12)
        y = rng.normal(size=12)
        slope, intercept, r2 = dg.fit_r2(np.column_stack([x, y]), transform)
        xt = np.log(x) if transform == "log" else x
        a = np.column_stack([xt, np.ones_like(xt)])
        coef = np.linalg.solve(a.T @ a, a.T @ y)
        resid = y - a @ coef
        ref_r2 = 1 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))
        assert abs(slope - coef[0]) < 1e-10 and abs(intercept - coef[1]) < 1e-10
        assert abs(r2 - ref_r2) < 1e-10


# -- output shift --------------------------------------------------------------

SHIFT_BATCH = SyntheticTask(vocab=12, min_len=10, max_len=10, batch_size=4, seed=9).batch(0)


def test_zero_epsilon_gives_zero_shift():
    curve = dg.output_shift(cfg(), [2, 4, 6], dg.PerturbSpec(epsilon=0.0), [0, 1], SHIFT_BATCH)
    assert curve.shifts == [0.0, 0.0, 0.0] and curve.r2 == 0.0


def test_shift_needs_three_depths():
    with pytest.raises(ValueError):
        dg.output_shift(cfg(), [2, 4], dg.PerturbSpec(), [0], SHIFT_BATCH)


@pytest.mark.parametrize("variant", ["postln", "preln", "admin"])
def test_shift_grows_with_depth(variant):
    curve = dg.output_shift(cfg(variant=variant, d_model=64, d_ff=256), [4, 8, 16], dg.PerturbSpec(),
                            range(4), SHIFT_BATCH)
    assert curve.shifts[0] < curve.shifts[1] < curve.shifts[2]


def test_measured_shift_tracks_dependency_prediction():
    for variant in ("postln", "preln"):
        model = dg.shift_model(cfg(variant=variant, d_model=64, d_ff=256), 12, 0, SHIFT_BATCH)
        measured, predicted = dg.shift_crosscheck(model, dg.PerturbSpec(), SHIFT_BATCH)
        assert 0.5 <= measured / predicted <= 2.0


def test_adam_perturbation_has_lr_sized_steps():
    model = dg.shift_model(cfg(), 4, 0, SHIFT_BATCH)
    delta = dg.perturbation(model, dg.PerturbSpec(kind="adam", lr=1e-3), SHIFT_BATCH)
    assert max(np.abs(d).max() for d in delta.values()) <= 1e-3 * (1 + 1e-9)


# -- update balance ------------------------------------------------------------

def _balance(kind, lr, warmup, epochs=3, steps=10):
    model = build_model(cfg(variant="preln", n_enc=3, n_dec=1))
    task = SyntheticTask(vocab=12, batch_size=16)
    return dg.balance_run(model, task, OptimConfig(kind=kind, lr_max=lr, warmup_steps=warmup), epochs, steps)


def test_sgd_updates_mirror_gradients():
    s = _balance(OptimKind.SGD, 0.1, 0)
    assert np.allclose(s.grad_rel, s.update_rel, rtol=0, atol=1e-9)
    g, u = s.spreads()
    assert np.allclose(g, u, rtol=1e-9)


def test_adam_narrows_update_spread():
    s = _balance(OptimKind.ADAM, 1e-3, 100)
    g, u = s.spreads()
    assert np.all(u[1:] < g[1:])
    assert np.all((s.grad_rel > 0) & (s.grad_rel <= 1)) and np.all(s.update_rel <= 1)


def test_preln_softmax_side_gradients_are_smaller():
    model = build_model(cfg(variant="preln", n_enc=3, n_dec=1))
    _, grads = compute_grads(model, BATCH)
    names = [n for n in dg.attention_matrix_names(model) if n.startswith("enc.")]
    qk = np.mean([np.linalg.norm(grads[n]) for n in names if n.endswith(("wq", "wk"))])
    v = np.mean([np.linalg.norm(grads[n]) for n in names if n.endswith(("wv1", "wv2"))])
    assert qk < v


def test_track_param_norms_needs_two_checkpoints():
    with pytest.raises(ValueError):
        dg.track_param_norms([{"a": np.ones(2)}], [], ["a"])


def test_csv_headers(tmp_path):
    model = build_model(cfg(n_dec=1))
    dg.write_grad_hist(tmp_path / "g.csv", dg.grad_histogram(model, BATCH))
    dg.write_beta(tmp_path / "b.csv", dg.estimate_beta(model, BATCH))
    curve = dg.output_shift(cfg(), [2, 4, 6], dg.PerturbSpec(), [0], SHIFT_BATCH)
    dg.write_shift(tmp_path / "s.csv", [curve])
    dg.write_fit(tmp_path / "f.csv", [curve])
    dg.write_param_norms(tmp_path / "p.csv", _balance(OptimKind.SGD, 0.1, 0, epochs=2, steps=2))
    heads = {p.name: next(csv.reader(open(p))) for p in tmp_path.iterdir()}
    assert heads["g.csv"] == ["side", "layer", "sublayer", "kind", "l2", "rel"]
    assert heads["b.csv"] == ["i", "j", "beta", "raw_row_sum"]
    assert heads["s.csv"] == ["variant", "N", "seed", "shift"]
    assert heads["f.csv"] == ["variant", "transform", "slope", "intercept", "r2"]
    assert heads["p.csv"] == ["epoch", "layer", "matrix", "grad_rel", "update_rel"]
