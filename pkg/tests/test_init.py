import math

import numpy as np
import pytest

from tlab import autodiff as ad
from tlab.blocks import ModelConfig, decoder_forward, encoder_forward, model_forward
from tlab.init import (InitFamily, InitScheme, ProfileRecord, admin_initialize, admin_profile,
                       build_admin_model, build_model, omega_from_profile, reparameterize)
from tlab.rng import stream
from tlab.trainer import SyntheticTask


def cfg(**kw):
    base = dict(variant="admin", n_enc=2, n_dec=2, d_model=16, n_heads=2, d_ff=32,
                src_vocab=10, tgt_vocab=10, max_len=16, dropout=0.0)
    return ModelConfig(**{**base, **kw})


BATCH = SyntheticTask(vocab=10, min_len=6, max_len=6, batch_size=8, seed=11).batch(0)


def test_norm_and_shortcut_parameters_start_at_identity():
    model = build_model(cfg())
    for sub in model.encoder + model.decoder:
        assert np.array_equal(sub.ln_gamma.data, np.ones(16))
        assert np.array_equal(sub.ln_nu.data, np.zeros(16))
        assert np.array_equal(sub.omega.data, np.ones(16))


@pytest.mark.parametrize("family", list(InitFamily))
def test_weight_moments_match_scheme(family):
    scheme = InitScheme(family=family)
    model = build_model(cfg(d_model=64, n_heads=4, d_ff=256, n_enc=3, n_dec=0), scheme)
    for name in ("enc.1.wq", "enc.2.w1", "enc.2.w2"):
        w = model.params[name].data
        target = scheme.variance(name.rsplit(".", 1)[1], w.shape)
        assert abs(w.mean()) < 0.05 * math.sqrt(target)
        assert abs(w.var() / target - 1) < 0.05
        assert model.init_vars[name] == target


def test_scheme_variances():
    assert InitScheme().variance("w1", (64, 256)) == pytest.approx(2 / 320)
    assert InitScheme(family="scaled_uniform", gain=2.0).variance("w1", (64, 256)) == pytest.approx(4 / 64)
    assert InitScheme(role_gains={"w2": 0.5}).variance("w2", (8, 8)) == pytest.approx(0.25 * 2 / 16)


def test_calibrated_branches_hit_target_variance():
    model = build_model(cfg(variant="postln", d_model=32, d_ff=64), InitScheme(branch_var=4.0), BATCH)
    _, (enc, dec) = model_forward(model, *BATCH)
    for e in enc.sublayers + dec.sublayers:
        assert e.var_a == pytest.approx(4.0, rel=1e-9)


def test_profile_is_deterministic_and_leaves_model_unchanged():
    model = build_model(cfg())
    before = model.state_dict()
    p1, p2 = admin_profile(model, BATCH), admin_profile(model, BATCH)
    assert p1 == p2
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    assert len(p1.encoder_var_f) == 4 and len(p1.decoder_var_f) == 6
    assert all(v >= 0 for v in p1.encoder_var_f + p1.decoder_var_f)


def test_profile_matches_direct_branch_variance():
    model = build_model(cfg())
    prof = admin_profile(model, BATCH)
    enc_out, enc = encoder_forward(model, BATCH.src)
    _, dec = decoder_forward(model, BATCH.tgt_in, enc_out)
    assert prof.encoder_var_f == [float(np.var(e.a.data)) for e in enc.sublayers]
    assert prof.decoder_var_f == [float(np.var(e.a.data)) for e in dec.sublayers]


def test_silent_branches_profile_to_zero():
    model = build_model(cfg())
    for sub in model.encoder + model.decoder:
        for w in ("w2", "wv2"):
            if w in sub.params:
                sub[w].data[:] = 0.0
    prof = admin_profile(model, BATCH)
    assert prof.encoder_var_f == [0.0] * 4 and prof.decoder_var_f == [0.0] * 6


def test_empty_profile_batch_rejected():
    with pytest.raises(ValueError):
        admin_profile(build_model(cfg()), (np.zeros((0, 3), dtype=int), np.zeros((0, 3), dtype=int),
                                           np.zeros((0, 3), dtype=int)))


def test_omega_examples():
    assert omega_from_profile([1.0] * 6) == [1.0] + [math.sqrt(i - 1) for i in range(2, 7)]
    assert omega_from_profile([0.0, 0.0, 0.0]) == [1.0, 1.0, 1.0]
    assert omega_from_profile([9.0, 7.0]) == [1.0, 3.0]


def test_omega_non_decreasing():
    rng = stream(0, "vf")
    w = omega_from_profile(list(rng.uniform(0, 3, size=30)))
    assert all(b >= a for a, b in zip(w, w[1:]))


def test_profile_length_mismatch_rejected():
    model = build_model(cfg())
    prof = admin_profile(model, BATCH)
    prof.encoder_var_f = prof.encoder_var_f[:-1]
    with pytest.raises(ValueError):
        admin_initialize(model, prof)


def test_admin_branch_input_variance_follows_omega():
    # b_i = omega_i * x_{i-1} + f_i with a nearly uncorrelated branch; seed-averaged
    batch = SyntheticTask(vocab=10, min_len=16, max_len=16, batch_size=16, seed=11).batch(0)
    ratios = []
    for seed in range(3):
        model, prof = build_admin_model(cfg(d_model=128, n_heads=4, d_ff=512, n_enc=4, n_dec=1, seed=seed), batch)
        _, (enc, _) = model_forward(model, *batch)
        ratios.append([e.var_b / (float(sub.omega.data[0]) ** 2 * enc[i - 1].var_x + vf)
                       for i, (sub, e, vf) in enumerate(zip(model.encoder, enc.sublayers, prof.encoder_var_f), 1)])
    assert np.all(np.abs(np.mean(ratios, axis=0) - 1) < 0.10)


def test_reparameterize_with_unit_omega_changes_nothing():
    model = build_model(cfg())
    post = reparameterize(model)
    assert post.variant.value == "postln"
    for k, v in model.state_dict().items():
        assert np.array_equal(post.params[k].data, v)


def test_reparameterize_random_omega_is_equivalent():
    model = build_model(cfg())
    rng = stream(1, "omega")
    for subs in (model.encoder, model.decoder):
        for sub in subs[1:]:
            sub.omega.data = rng.uniform(0.5, 3.0, size=16)
            sub.ln_gamma.data = rng.uniform(0.5, 1.5, size=16)
            sub.ln_nu.data = rng.normal(0, 0.1, size=16)
    post = reparameterize(model)
    with ad.no_tape():
        la, (ea, da) = model_forward(model, *BATCH)
        lb, (eb, db) = model_forward(post, *BATCH)
    assert ad.rel_error(ea.output, eb.output) < 1e-10
    assert ad.rel_error(da.output, db.output) < 1e-10
    assert abs(la.item() - lb.item()) < 1e-10 * abs(la.item())


def test_reparameterize_refuses_unfoldable_first_omega():
    model = build_model(cfg())
    model.encoder[0].omega.data[:] = 2.0
    with pytest.raises(ValueError):
        reparameterize(model)
    with pytest.raises(ValueError):
        reparameterize(build_model(cfg(variant="postln")))


def test_first_omega_is_frozen():
    model = build_model(cfg())
    assert "enc.1.omega" not in model.trainable() and "enc.2.omega" in model.trainable()


def test_profile_record_round_trip(tmp_path):
    prof = admin_profile(build_model(cfg()), BATCH)
    prof.save(tmp_path / "p.csv")
    assert ProfileRecord.load(tmp_path / "p.csv") == prof
