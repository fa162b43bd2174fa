import csv
import math

import numpy as np
import pytest

from tlab.oracle import (VarianceEstimate, attention_sigma2, backprop_ratio_check, estimate_Ph,
                         ffn_sigma2, mc_attention_variance, mc_ffn_variance, shift_recursion,
                         write_report)


def test_ffn_closed_form_examples():
    assert ffn_sigma2(64, 256, 1 / 64, 1 / 64) == pytest.approx(3.0, abs=1e-15)
    assert ffn_sigma2(64, 256, 1 / 64, 0.0) == 1.0
    with pytest.raises(ValueError):
        ffn_sigma2(0, 4, 1.0, 1.0)


def test_attention_closed_form_examples():
    assert attention_sigma2(2, 0.25, 1.0, 1.0) == 2.0
    # exact per-entry form: L weighted value rows each contribute P_h
    assert attention_sigma2(2, 1 / 16, 1.0, 1.0, length=4) == 2.0
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            attention_sigma2(2, bad, 1.0, 1.0)


@pytest.mark.parametrize("d,d_ff,v1,v2", [(8, 16, 0.1, 0.3), (64, 256, 1 / 64, 1 / 64), (4, 4, 0.0, 2.0)])
def test_closed_forms_never_below_residual(d, d_ff, v1, v2):
    assert ffn_sigma2(d, d_ff, v1, v2) >= 1.0
    assert attention_sigma2(d, 0.5, v1, v2) >= 1.0


def test_ffn_monte_carlo_agrees():
    var = 2 / (32 + 128)
    e = mc_ffn_variance(32, 128, var, var, samples=100_000, seed=1)
    assert e.samples >= 100_000
    assert e.rel_error < 0.05
    assert abs(e.monte_carlo - e.closed_form) < 4 * e.std_error


def test_attention_monte_carlo_agrees():
    e = mc_attention_variance(32, 4, 16, 1 / 32, 1 / 32, 1 / 32, 1 / 32, samples=100_000, seed=2,
                              ph_samples=2000)
    assert e.rel_error < 0.10
    u = mc_attention_variance(32, 4, 16, 0, 0, 1 / 32, 1 / 32, samples=100_000, seed=2, uniform=True)
    assert u.inputs["P_h"] == 1 / 256
    assert abs(u.monte_carlo - u.closed_form) < 4 * u.std_error


def test_ph_degenerate_cases():
    assert estimate_Ph(8, 2, 1, 1.0, 1.0, samples=1000) == pytest.approx(1.0, abs=1e-15)
    assert estimate_Ph(8, 2, 5, 0.0, 0.0, samples=1000) == pytest.approx(1 / 25, rel=1e-14)
    with pytest.raises(ValueError):
        estimate_Ph(8, 2, 5, 1.0, 1.0, samples=999)


def test_ph_is_stable_across_seeds():
    vals = [estimate_Ph(32, 4, 16, 1 / 32, 1 / 32, samples=10_000, seed=s) for s in range(4)]
    assert np.std(vals) / np.mean(vals) < 0.05


def test_ph_weakly_decreases_with_length():
    vals = [estimate_Ph(16, 2, n, 1 / 16, 1 / 16, samples=2000, seed=3) for n in (1, 2, 4, 8, 16)]
    assert all(0 < v <= 1 for v in vals)
    assert all(b <= a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("kind", ["ffn", "self_att"])
def test_backprop_ratio_no_vanishing(kind):
    assert backprop_ratio_check(kind, d=64, samples=16) >= 0.95


def test_backprop_ratio_vanishes_through_encoder_attention():
    assert backprop_ratio_check("enc_att", d=64, samples=16) < 1.0


def test_recursion_harmonic_and_constant():
    n = 8
    assert shift_recursion([1 / i for i in range(1, n + 1)], 1.0) == pytest.approx(2.717857142857, abs=1e-12)
    assert shift_recursion([0.3] * 10, 1.0) == pytest.approx(3.0, abs=1e-12)
    assert shift_recursion([0.3] * 20, 1.0) == pytest.approx(6.0, abs=1e-12)
    assert shift_recursion([0.5, 1.0], [2.0, 3.0]) == pytest.approx(4.0)


@pytest.mark.parametrize("n", [32, 64, 256, 1024])
def test_recursion_harmonic_tracks_log(n):
    v = shift_recursion([1 / i for i in range(1, n + 1)], 1.0)
    assert abs(v / (math.log(n) + 0.5772) - 1) < 0.05


def test_recursion_rejects_bad_dependencies():
    for bad in ([0.0], [1.2]):
        with pytest.raises(ValueError):
            shift_recursion(bad, 1.0)


def test_report_columns(tmp_path):
    e = VarianceEstimate("ffn_sigma2", 2.0, 2.1, 100, 0)
    assert e.rel_error == pytest.approx(0.05)
    write_report(tmp_path / "r.csv", [e])
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["check_name", "closed_form", "monte_carlo", "rel_error", "samples", "seed"]
    assert rows[1][0] == "ffn_sigma2" and float(rows[1][3]) == pytest.approx(0.05)
