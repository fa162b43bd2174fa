"""The ten acceptance checks, runnable from the test suite or from ``tlab reproduce-all``.

Each check returns a :class:`Criterion` with the measured numbers in ``detail``;
nothing here asserts, so a failing check still reports what it saw.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import ModelConfig, SubLayerKind, decoder_forward, encoder_forward, model_forward
from .diagnostics import (PerturbSpec, beta_study, balance_run, coefficient_of_variation,
                          median_beta, output_shift, ratio_study)
from .gradcheck import run_suite
from .init import InitScheme, build_admin_model, build_model, reparameterize
from .oracle import estimate_Ph, mc_attention_variance, mc_ffn_variance
from .trainer import OptimConfig, SyntheticTask, train


@dataclass
class Criterion:
    number: int
    title: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d}: {self.title} ({self.seconds:.1f}s)"


def fixed_batch(batch_size: int, length: int, seed: int = 0, vocab: int = 12):
    task = SyntheticTask(vocab=vocab, min_len=length, max_len=length, batch_size=batch_size, seed=seed)
    return task.batch(1)


# 1 ----------------------------------------------------------------------------

def c1_gradcheck(seeds=range(10)) -> dict:
    results = run_suite(seeds=seeds)
    ops = [r.rel_error for r in results if not r.name.startswith("model/")]
    full = [r.rel_error for r in results if r.name.startswith("model/")]
    return dict(passed=all(r.ok for r in results), max_op_error=max(ops), max_model_error=max(full),
                checks=len(results))


# 2, 3 ----------------------------------------------------------------------------

def c2_ffn_variance(d: int = 32, d_ff: int = 128, samples: int = 131_072) -> dict:
    var = 2.0 / (d + d_ff)  # Xavier for both D x D_f and D_f x D
    e = mc_ffn_variance(d, d_ff, var, var, samples)
    return dict(passed=e.rel_error < 0.05 and e.samples >= 100_000, closed_form=e.closed_form,
                monte_carlo=e.monte_carlo, rel_error=e.rel_error, samples=e.samples)


def c3_attention_variance(d: int = 32, n_heads: int = 4, length: int = 16, samples: int = 131_072) -> dict:
    var = 1.0 / d  # Xavier for D x D
    e = mc_attention_variance(d, n_heads, length, var, var, var, var, samples=samples)
    u = mc_attention_variance(d, n_heads, length, var, var, var, var, samples=samples, uniform=True)
    ph_zero = estimate_Ph(d, n_heads, length, 0.0, 0.0, samples=1000)
    z = abs(u.monte_carlo - u.closed_form) / u.std_error
    exact = abs(ph_zero - 1.0 / length ** 2) < 1e-15
    return dict(passed=e.rel_error < 0.10 and z < 4.0 and exact, rel_error=e.rel_error, P_h=e.inputs["P_h"],
                uniform_rel_error=u.rel_error, uniform_z=z, P_h_zero_qk=ph_zero)


# 4, 5 ----------------------------------------------------------------------------

RATIO_MODEL = ModelConfig(n_enc=9, n_dec=6, d_model=128, n_heads=4, d_ff=512, src_vocab=12, tgt_vocab=12,
                          dropout=0.0)


def _ratio(variant: str, seeds) -> dict:
    cfg = ModelConfig.from_dict({**RATIO_MODEL.to_dict(), "variant": variant})
    return ratio_study(cfg, lambda s: fixed_batch(32, 16, seed=s), seeds)


def c4_theorem1(seeds=range(10)) -> dict:
    post = _ratio("postln", seeds)
    pre = _ratio("preln", seeds)
    enc = float(post["ratio/encoder"].median.min())
    pre_enc = float(pre["ratio/encoder"].median.min())
    pre_dec = float(pre["ratio/decoder"].median.min())
    return dict(passed=min(enc, pre_enc, pre_dec) >= 0.95, postln_encoder_min=enc,
                preln_encoder_min=pre_enc, preln_decoder_min=pre_dec, sublayers=2 * RATIO_MODEL.n_enc)


def c5_decoder_vanishing(seeds=range(10)) -> dict:
    post = _ratio("postln", seeds)
    hyb = _ratio("hybrid", seeds)
    kinds = ["self_att", "enc_att", "ffn"] * RATIO_MODEL.n_dec
    med = post["ratio/decoder"].median
    enc_att = [float(r) for r, k in zip(med, kinds) if k == SubLayerKind.ENCODER_ATTENTION.value]
    decay = float(post["decay/decoder"].median)
    rel = post["rel/decoder"].median
    return dict(passed=max(enc_att) < 1.0 and decay >= 10.0 and not hyb["vanishing"],
                enc_att_ratios=enc_att, variance_decay=decay, norm_decay=float(rel[-1] / rel[0]),
                hybrid_vanishing=len(hyb["vanishing"]))


# 6 ----------------------------------------------------------------------------

BETA_MODEL = ModelConfig(n_enc=6, n_dec=1, d_model=128, n_heads=4, d_ff=512, src_vocab=12, tgt_vocab=12,
                         dropout=0.0)
BETA_SCHEME = InitScheme(branch_var=8.0)


def beta_medians(seeds=range(10)):
    batch = fixed_batch(16, 16)
    out = {}
    for v in ("preln", "postln", "admin"):
        cfg = ModelConfig.from_dict({**BETA_MODEL.to_dict(), "variant": v})
        out[v] = median_beta(beta_study(cfg, batch, seeds, BETA_SCHEME))
    return out


def c6_beta(seeds=range(10)) -> dict:
    med = beta_medians(seeds)
    detail, ok = {}, True
    for v, bm in med.items():
        dev = float(np.abs(bm.raw_row_sums[1:] - 1.0).max())
        detail[f"{v}_raw_row_sum_dev"] = dev
        ok &= dev <= 0.1
    i = np.arange(1, len(med["preln"].diag_sq) + 1)
    for v in ("preln", "admin"):
        err = float(np.abs(med[v].diag_sq * i - 1.0).max())
        detail[f"{v}_inverse_i_dev"] = err
        ok &= err <= 0.2
    cv = coefficient_of_variation(med["postln"].diag_sq[2:])
    detail["postln_cv"] = cv
    return dict(passed=bool(ok and cv < 0.3), **detail)


# 7 ----------------------------------------------------------------------------

SHIFT_MODEL = ModelConfig(d_model=128, n_heads=4, d_ff=512, src_vocab=12, tgt_vocab=12,
                          dropout=0.0)
SHIFT_NS = (4, 8, 16, 32, 64)


def _shift_job(args):
    variant, kind, seeds = args
    tmpl = ModelConfig.from_dict({**SHIFT_MODEL.to_dict(), "variant": variant})
    curve = output_shift(tmpl, SHIFT_NS, PerturbSpec(kind=kind, epsilon=0.1), seeds, fixed_batch(8, 10),
                         transform="identity" if variant == "postln" else "log")
    return curve


def shift_curves(seeds=range(10), jobs: int = 1):
    keys = [("postln", "random"), ("postln", "adam"), ("preln", "random"), ("admin", "random")]
    args = [(v, k, tuple(seeds)) for v, k in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            curves = list(pool.map(_shift_job, args))
    else:
        curves = [_shift_job(a) for a in args]
    return dict(zip(keys, curves))


def c7_shift(seeds=range(10), jobs: int = 1) -> dict:
    c = shift_curves(seeds, jobs)
    post, adam = c[("postln", "random")].r2, c[("postln", "adam")].r2
    pre, admin = c[("preln", "random")].r2, c[("admin", "random")].r2
    return dict(passed=post >= 0.95 and pre >= 0.95 and admin >= 0.90 and adam < post,
                postln_r2_linear=post, postln_adam_r2_linear=adam, preln_r2_log=pre, admin_r2_log=admin)


# 8 ----------------------------------------------------------------------------

def c8_reparameterize(batches: int = 5, warm_steps: int = 20) -> dict:
    cfg = ModelConfig(variant="admin", n_enc=6, n_dec=6, d_model=32, n_heads=4, d_ff=64,
                      src_vocab=12, tgt_vocab=12, dropout=0.0)
    task = SyntheticTask(vocab=12, seed=7)
    model, _ = build_admin_model(cfg, task.batch(0))
    # a few updates so that gamma, nu and omega are no longer at their initial values
    train(model, task, OptimConfig(lr_max=1e-3, warmup_steps=0), warm_steps)
    post = reparameterize(model)
    worst_out = worst_loss = 0.0
    for k in range(batches):
        b = SyntheticTask(vocab=12, seed=100 + k).batch(k)
        with ad.no_tape():
            la, _ = model_forward(model, *b)
            lb, _ = model_forward(post, *b)
            ea, _ = encoder_forward(model, b.src)
            eb, _ = encoder_forward(post, b.src)
            oa, _ = decoder_forward(model, b.tgt_in, ea)
            ob, _ = decoder_forward(post, b.tgt_in, eb)
        worst_out = max(worst_out, ad.rel_error(oa, ob), ad.rel_error(ea, eb))
        worst_loss = max(worst_loss, abs(la.item() - lb.item()) / abs(la.item()))
    return dict(passed=worst_out < 1e-9 and worst_loss < 1e-9, output_rel_error=worst_out,
                loss_rel_error=worst_loss)


# 9 ----------------------------------------------------------------------------

BALANCE_MODEL = ModelConfig(variant="preln", n_enc=9, n_dec=1, d_model=32, n_heads=4, d_ff=64,
                            src_vocab=12, tgt_vocab=12, dropout=0.0)


def c9_balance(epochs: int = 4, steps_per_epoch: int = 50) -> dict:
    task = SyntheticTask(vocab=12)
    adam = balance_run(build_model(BALANCE_MODEL), task, OptimConfig(lr_max=1e-3, warmup_steps=400),
                       epochs, steps_per_epoch)
    g, u = adam.spreads()
    ratio = g[2:] / u[2:]  # epochs after the third checkpoint onwards
    sgd = balance_run(build_model(BALANCE_MODEL), task, OptimConfig(kind="sgd", lr_max=0.1, warmup_steps=0),
                      epochs, steps_per_epoch)
    sg, su = sgd.spreads()
    sgd_gap = float(np.abs(sg / su - 1.0).max())
    return dict(passed=bool(ratio.min() >= 5.0 and sgd_gap <= 1e-6), adam_spread_ratio=ratio.tolist(),
                sgd_spread_gap=sgd_gap, sgd_rel_gap=float(np.abs(sgd.grad_rel - sgd.update_rel).max()))


# 10 ----------------------------------------------------------------------------

CONVERGE_MODEL = ModelConfig(n_enc=3, n_dec=3, d_model=32, n_heads=4, d_ff=64, src_vocab=12, tgt_vocab=12)
CONVERGE_OPTIM = OptimConfig(lr_max=1e-3, warmup_steps=400)


def eval_loss(model, task: SyntheticTask, batches: int = 4, first: int = 1_000_000) -> float:
    """Mean dropout-free loss on batches the training run never draws."""
    with ad.no_tape():
        return float(np.mean([model_forward(model, *task.batch(first + k))[0].item() for k in range(batches)]))


def _converge_job(variant: str, steps: int = 2000):
    cfg = ModelConfig.from_dict({**CONVERGE_MODEL.to_dict(), "variant": variant})
    task = SyntheticTask(vocab=12, min_len=4, max_len=8, batch_size=32)
    if variant == "admin":
        model, _ = build_admin_model(cfg, task.batch(0))
    else:
        model = build_model(cfg)
    rec = train(model, task, CONVERGE_OPTIM, steps)
    tail = float(rec.losses[-50:].mean()) if len(rec.steps) else math.inf
    final = eval_loss(model, task) if not rec.diverged else math.inf
    return variant, final, tail, rec.diverged


def c10_convergence(steps: int = 2000, jobs: int = 1) -> dict:
    variants = ["preln", "postln", "admin"]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, 3)) as pool:
            runs = list(pool.map(_converge_job, variants, [steps] * 3))
    else:
        runs = [_converge_job(v, steps) for v in variants]
    detail = {f"{v}_final_loss": loss for v, loss, _, _ in runs}
    detail.update({f"{v}_train_tail": tail for v, _, tail, _ in runs})
    ok = all(loss < 0.1 and not div for _, loss, _, div in runs)
    return dict(passed=ok, **detail)


CRITERIA: list[tuple[int, str, Callable[..., dict]]] = [
    (1, "finite-difference gradients of every op and a full model", c1_gradcheck),
    (2, "feed-forward residual variance against Monte-Carlo", c2_ffn_variance),
    (3, "attention residual variance against Monte-Carlo", c3_attention_variance),
    (4, "no gradient vanishing in encoders and Pre-LN stacks", c4_theorem1),
    (5, "Post-LN decoder vanishing at encoder attention", c5_decoder_vanishing),
    (6, "layer dependency matrices at initialization", c6_beta),
    (7, "output shift scale laws", c7_shift),
    (8, "Admin reparameterization equivalence", c8_reparameterize),
    (9, "adaptive update balancing", c9_balance),
    (10, "toy convergence on the Copy task", c10_convergence),
]

PARALLEL = {7, 10}


def run_criterion(number: int, jobs: int = 1) -> Criterion:
    _, title, fn = CRITERIA[number - 1]
    t0 = time.perf_counter()
    detail = fn(jobs=jobs) if number in PARALLEL else fn()
    passed = bool(detail.pop("passed"))
    return Criterion(number, title, passed, detail, time.perf_counter() - t0)


def run_all(jobs: int = 1, only=None) -> list[Criterion]:
    return [run_criterion(n, jobs) for n, _, _ in CRITERIA if only is None or n in only]


def deep_stack_report(layers: int = 18, steps: int = 300, d_model: int = 32) -> dict:
    """Post-LN versus Admin on a deep stack; reported, never asserted."""
    out = {}
    task = SyntheticTask(vocab=12, min_len=4, max_len=8, batch_size=32)
    for variant in ("postln", "admin"):
        cfg = ModelConfig(variant=variant, n_enc=layers, n_dec=layers, d_model=d_model, n_heads=4,
                          d_ff=2 * d_model, src_vocab=12, tgt_vocab=12)
        if variant == "admin":
            model, _ = build_admin_model(cfg, task.batch(0))
        else:
            model = build_model(cfg)
        rec = train(model, task, CONVERGE_OPTIM, steps)
        out[variant] = dict(final_loss=eval_loss(model, task) if not rec.diverged else math.nan,
                            diverged=rec.diverged, diverged_at=rec.diverged_at, steps=len(rec.steps))
    return out
