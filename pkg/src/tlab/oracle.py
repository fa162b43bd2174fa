"""Closed-form initialization-time variances and their Monte-Carlo checks.

Inputs to every sampler are i.i.d. standard normal, so the residual path
contributes exactly unit variance. Sampling is split into chunks, each with
its own derived random stream, and chunks are reduced in index order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import ModelConfig, Model, SubLayerKind, Wiring, sublayer_forward
from .init import InitScheme, init_standard
from .rng import derive_seed, stream


@dataclass
class VarianceEstimate:
    name: str
    closed_form: float
    monte_carlo: float
    samples: int
    seed: int
    inputs: dict = field(default_factory=dict)
    std_error: float = 0.0

    @property
    def rel_error(self) -> float:
        return abs(self.monte_carlo - self.closed_form) / self.closed_form


def ffn_sigma2(d: int, d_ff: int, var_w1: float, var_w2: float) -> float:
    """Var[b] for b = x + relu(x W1) W2 with unit-variance x."""
    if d <= 0 or d_ff <= 0 or var_w1 < 0 or var_w2 < 0:
        raise ValueError("sizes must be positive and variances non-negative")
    return 1.0 + 0.5 * d * d_ff * var_w1 * var_w2


def attention_sigma2(d: int, p_h: float, var_v1: float, var_v2: float, length: int = 1) -> float:
    """Var[b] for a residual multi-head attention block with unit-variance input.

    ``p_h`` is the mean squared attention weight per entry. The branch output
    sums ``length`` weighted value rows, so the exact form carries a factor of
    ``length``; with the default ``length=1`` ``p_h`` is read as the per-row sum
    of squared weights.
    """
    if not 0.0 < p_h <= 1.0:
        raise ValueError("P_h must lie in (0, 1]")
    if length < 1:
        raise ValueError("length must be at least 1")
    return 1.0 + length * d * d * p_h * var_v1 * var_v2


def _chunks(total: int, size: int):
    full, rest = divmod(total, size)
    return [size] * full + ([rest] if rest else [])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def estimate_Ph(d: int, n_heads: int, length: int, var_q: float, var_k: float,
                temperature: bool = True, samples: int = 10_000, seed: int = 0,
                chunk: int = 256) -> float:
    """Mean squared attention weight with fresh inputs and weights per sample.

    Each sample is one draw of ``x`` (``length x d``) and of the query/key
    projections; all heads and rows of that draw contribute.
    """
    if samples < 1000:
        raise ValueError("estimate_Ph needs at least 1000 samples")
    if d % n_heads:
        raise ValueError("d must be divisible by n_heads")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh) if temperature else 1.0
    total = 0.0
    for c, n in enumerate(_chunks(samples, chunk)):
        rng = stream(seed, f"ph/{c}")
        x = rng.standard_normal((n, length, d))
        wq = rng.standard_normal((n, n_heads, d, dh)) * math.sqrt(var_q)
        wk = rng.standard_normal((n, n_heads, d, dh)) * math.sqrt(var_k)
        q = np.einsum("nld,nhde->nhle", x, wq)
        k = np.einsum("nld,nhde->nhle", x, wk)
        s = _softmax(np.einsum("nhle,nhme->nhlm", q, k) * scale)
        total += float((s * s).sum())
    return total / (samples * n_heads * length * length)


def _std_error(draws: np.ndarray) -> float:
    return float(draws.std(ddof=1) / math.sqrt(draws.size))


def mc_ffn_variance(d: int, d_ff: int, var_w1: float, var_w2: float, samples: int = 131_072,
                    seed: int = 0, rows: int = 8) -> VarianceEstimate:
    """Monte-Carlo Var[b] over ``samples`` output elements; weights redrawn every ``rows`` rows."""
    per = rows * d
    n_draws = max(2, math.ceil(samples / per))
    draws = np.empty(n_draws)
    for c in range(n_draws):
        rng = stream(seed, f"ffn/{c}")
        x = rng.standard_normal((rows, d))
        w1 = rng.standard_normal((d, d_ff)) * math.sqrt(var_w1)
        w2 = rng.standard_normal((d_ff, d)) * math.sqrt(var_w2)
        b = x + np.maximum(x @ w1, 0.0) @ w2
        draws[c] = float(np.mean(b * b))
    return VarianceEstimate("ffn_sigma2", ffn_sigma2(d, d_ff, var_w1, var_w2), float(draws.mean()),
                            n_draws * per, seed, dict(D=d, D_f=d_ff, var_w1=var_w1, var_w2=var_w2),
                            _std_error(draws))


def mc_attention_variance(d: int, n_heads: int, length: int, var_q: float, var_k: float,
                          var_v1: float, var_v2: float, temperature: bool = True,
                          samples: int = 131_072, seed: int = 0, ph_samples: int = 10_000,
                          uniform: bool = False) -> VarianceEstimate:
    """Monte-Carlo Var[b] for residual attention against the closed form with measured P_h.

    ``uniform=True`` zeroes the query/key path, making every weight ``1/length``.
    """
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh) if temperature else 1.0
    if uniform:
        p_h = 1.0 / (length * length)
    else:
        p_h = estimate_Ph(d, n_heads, length, var_q, var_k, temperature, ph_samples,
                          derive_seed(seed, "ph"))
    per = length * d
    n_draws = max(2, math.ceil(samples / per))
    draws = np.empty(n_draws)
    for c in range(n_draws):
        rng = stream(seed, f"att/{c}")
        x = rng.standard_normal((length, d))
        if uniform:
            s = np.full((n_heads, length, length), 1.0 / length)
        else:
            wq = rng.standard_normal((n_heads, d, dh)) * math.sqrt(var_q)
            wk = rng.standard_normal((n_heads, d, dh)) * math.sqrt(var_k)
            q = np.einsum("ld,hde->hle", x, wq)
            k = np.einsum("md,hde->hme", x, wk)
            s = _softmax(np.einsum("hle,hme->hlm", q, k) * scale)
        v1 = rng.standard_normal((n_heads, d, dh)) * math.sqrt(var_v1)
        v2 = rng.standard_normal((n_heads, dh, d)) * math.sqrt(var_v2)
        v = np.einsum("md,hde,hef->hmf", x, v1, v2)
        b = x + np.einsum("hlm,hmf->lf", s, v)
        draws[c] = float(np.mean(b * b))
    cf = attention_sigma2(d, p_h, var_v1, var_v2, length)
    name = "attention_sigma2_uniform" if uniform else "attention_sigma2"
    return VarianceEstimate(name, cf, float(draws.mean()), n_draws * per, seed,
                            dict(D=d, H=n_heads, L=length, var_v1=var_v1, var_v2=var_v2, P_h=p_h),
                            _std_error(draws))


_KIND_SLOT = {
    SubLayerKind.SELF_ATTENTION: ("encoder", 0),
    SubLayerKind.FEED_FORWARD: ("encoder", 1),
    SubLayerKind.ENCODER_ATTENTION: ("decoder", 1),
}


def backprop_ratio_check(kind: SubLayerKind | str, d: int = 64, width: int | None = None,
                         scheme: InitScheme | None = None, samples: int = 32, seed: int = 0,
                         length: int = 16, rows: int = 8) -> float:
    """Var[dx_in] / Var[dx_out] through one Post-LN sub-layer at initialization.

    ``width`` is ``d_ff`` for feed-forward and the head count for attention.
    Every sample redraws the sub-layer weights, the unit-normal input (and, for
    encoder attention, the attended memory) and a unit-normal upstream gradient.
    """
    kind = SubLayerKind(getattr(kind, "value", kind))
    is_ffn = kind is SubLayerKind.FEED_FORWARD
    d_ff = (width or 4 * d) if is_ffn else 4 * d
    n_heads = 4 if is_ffn else (width or 4)
    side, slot = _KIND_SLOT[kind]
    num = den = 0.0
    for c in range(samples):
        rng = stream(seed, f"ratio/{kind.value}/{c}")
        cfg = ModelConfig(variant="postln", n_enc=1, n_dec=1, d_model=d, n_heads=n_heads, d_ff=d_ff,
                          max_len=max(64, length), dropout=0.0)
        model = init_standard(Model(cfg), scheme, rng)
        sub = (model.encoder if side == "encoder" else model.decoder)[slot]
        x = ad.Tensor(rng.standard_normal((rows, length, d)), requires_grad=True)
        mem = ad.Tensor(rng.standard_normal((rows, length, d))) if kind is SubLayerKind.ENCODER_ATTENTION else None
        g = rng.standard_normal((rows, length, d))
        with ad.Tape():
            y, _ = sublayer_forward(Wiring.POST, sub, x, mem, False, n_heads=n_heads,
                                    temperature=cfg.temperature,
                                    causal=kind is SubLayerKind.SELF_ATTENTION and side == "decoder")
            ad.backward(ad.tsum(ad.mul(y, ad.Tensor(g))))
        num += float((x.grad * x.grad).sum())
        den += float((g * g).sum())
    return num / den


def shift_recursion(beta_diag, c) -> float:
    """Accumulated output shift ``v_N`` from ``v_i = v_{i-1} + beta_ii^2 * C_i``.

    ``c`` is one constant or one value per sub-layer.
    """
    diag = np.asarray(beta_diag, dtype=float)
    if np.any(diag <= 0.0) or np.any(diag > 1.0):
        raise ValueError("squared dependencies must lie in (0, 1]")
    cs = np.broadcast_to(np.asarray(c, dtype=float), diag.shape)
    v = 0.0
    for b, ci in zip(diag, cs):
        v = v + b * ci
    closed = float((diag * cs).sum())
    assert abs(v - closed) <= 1e-12 * max(1.0, abs(closed)), "recursion disagrees with the closed sum"
    return v


def write_report(path, estimates: list[VarianceEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check_name", "closed_form", "monte_carlo", "rel_error", "samples", "seed"])
        for e in estimates:
            w.writerow([e.name, f"{e.closed_form:.17e}", f"{e.monte_carlo:.17e}", f"{e.rel_error:.17e}",
                        e.samples, e.seed])


def estimate_dict(e: VarianceEstimate) -> dict:
    d = asdict(e)
    d["rel_error"] = e.rel_error
    return d
