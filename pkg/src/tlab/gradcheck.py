"""Finite-difference checks for every differentiable operation and for a whole model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import ModelConfig, model_forward
from .init import build_model
from .rng import stream

OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    input: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_error < self.tol


Case = tuple[Callable[..., ad.Tensor], list[ad.Tensor]]


def _t(rng, *shape, lo=None):
    a = rng.standard_normal(shape)
    if lo is not None:  # keep away from kinks
        a = np.where(np.abs(a) < lo, np.sign(a + 1e-300) * lo, a)
    return ad.Tensor(a, requires_grad=True)


def _dropout_case(rng) -> Case:
    seed = int(rng.integers(1 << 30))
    return (lambda x: ad.dropout(x, 0.3, True, stream(seed, "mask")), [_t(rng, 4, 5)])


def _softmax_case(rng) -> Case:
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
    return (lambda x: ad.row_softmax(x, mask), [_t(rng, 2, 4, 4)])


def _ce_case(rng) -> Case:
    targets = rng.integers(0, 5, size=6)
    return (lambda z: ad.cross_entropy(z, targets), [_t(rng, 6, 5)])


def _embedding_case(rng) -> Case:
    ids = rng.integers(0, 5, size=(2, 3))
    return (lambda w: ad.embedding(w, ids), [_t(rng, 5, 4)])


OPS: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": lambda r: (ad.add, [_t(r, 3, 4), _t(r, 4)]),
    "sub": lambda r: (ad.sub, [_t(r, 3, 4), _t(r, 3, 1)]),
    "mul": lambda r: (ad.mul, [_t(r, 2, 3, 4), _t(r, 4)]),
    "scale_elementwise": lambda r: (ad.scale_elementwise, [_t(r, 3, 4), _t(r, 4)]),
    "matmul": lambda r: (ad.matmul, [_t(r, 2, 3, 4), _t(r, 4, 5)]),
    "relu": lambda r: (ad.relu, [_t(r, 4, 5, lo=0.05)]),
    "row_softmax": _softmax_case,
    "layer_norm": lambda r: (ad.layer_norm, [_t(r, 3, 6), _t(r, 6), _t(r, 6)]),
    "dropout": _dropout_case,
    "cross_entropy": _ce_case,
    "embedding": _embedding_case,
    "reshape": lambda r: (lambda x: ad.reshape(x, (4, 3)), [_t(r, 2, 6)]),
    "swapaxes": lambda r: (lambda x: ad.swapaxes(x, 0, 2), [_t(r, 2, 3, 4)]),
    "tsum": lambda r: (ad.tsum, [_t(r, 3, 4)]),
    "tmean": lambda r: (ad.tmean, [_t(r, 3, 4)]),
}


def check_op(name: str, seed: int = 0, h: float = 1e-5, tol: float = OP_TOL) -> list[CheckResult]:
    """Analytic versus central-difference gradient of a random projection of the op output."""
    rng = stream(seed, f"gradcheck/{name}")
    fn, inputs = OPS[name](rng)
    with ad.no_tape():
        shape = fn(*inputs).shape
    proj = ad.Tensor(rng.standard_normal(shape))

    def scalar(*xs):
        return ad.tsum(ad.mul(fn(*xs), proj))

    for x in inputs:
        x.grad = None
    with ad.Tape():
        ad.backward(scalar(*inputs))
    out = []
    for k, x in enumerate(inputs):
        def f(_x, k=k):
            return scalar(*inputs)
        num = ad.finite_diff_grad(f, x, h)
        ana = x.grad if x.grad is not None else np.zeros_like(x.data)
        out.append(CheckResult(name, seed, f"arg{k}", ad.rel_error(ana, num), tol))
    return out


GRADCHECK_MODEL = ModelConfig(variant="postln", n_enc=2, n_dec=2, d_model=4, n_heads=2, d_ff=8,
                              src_vocab=5, tgt_vocab=5, max_len=8, dropout=0.0)


def check_model(seed: int = 0, config: ModelConfig | None = None, h: float = 1e-5,
                tol: float = MODEL_TOL) -> list[CheckResult]:
    """Every trainable parameter of a small model against central differences of the loss."""
    cfg = ModelConfig.from_dict({**(config or GRADCHECK_MODEL).to_dict(), "seed": seed})
    model = build_model(cfg)
    rng = stream(seed, "gradcheck/model")
    src = rng.integers(0, cfg.src_vocab, size=(2, 3))
    tgt = rng.integers(0, cfg.tgt_vocab, size=(2, 4))
    tgt_in, tgt_out = tgt[:, :-1], tgt[:, 1:]
    model.zero_grad()
    with ad.Tape():
        loss, _ = model_forward(model, src, tgt_in, tgt_out)
        ad.backward(loss)
    out = []
    for name, p in model.trainable().items():
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = ad.finite_diff_grad(lambda _p: model_forward(model, src, tgt_in, tgt_out)[0], p, h)
        out.append(CheckResult(f"model/{cfg.variant.value}", seed, name, ad.rel_error(ana, num), tol))
    return out


def run_suite(ops: list[str] | None = None, seeds=range(10), include_model: bool = True) -> list[CheckResult]:
    """All requested ops (default: every registered op) and optionally the model, per seed."""
    names = list(OPS) if ops is None else list(ops)
    if not names and not include_model:
        raise ValueError("nothing to check")
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise KeyError(f"unknown ops: {', '.join(unknown)}")
    results = []
    for s in seeds:
        for n in names:
            results += check_op(n, s)
        if include_model:
            results += check_model(s)
    return results
