"""Optimizers, the inverse-sqrt warmup schedule, synthetic seq2seq tasks and the training loop."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .blocks import Model, load_model, model_forward, save_model
from .rng import stream

BOS = 0


class OptimKind(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimConfig:
    kind: OptimKind = OptimKind.ADAM
    lr_max: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-8
    warmup_steps: int = 8000
    weight_decay: float = 0.0

    def __post_init__(self):
        self.kind = OptimKind(str(getattr(self.kind, "value", self.kind)).lower())
        if self.lr_max < 0 or self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("lr_max, warmup_steps and weight_decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


def lr_schedule(t: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``lr_max`` over ``warmup_steps``, then ``lr_max * sqrt(w / t)``.

    ``warmup_steps == 0`` means a constant ``lr_max``.
    """
    if t < 1:
        raise ValueError("steps are counted from 1")
    w = cfg.warmup_steps
    if w == 0:
        return cfg.lr_max
    if t <= w:
        return cfg.lr_max * t / w
    return cfg.lr_max * math.sqrt(w / t)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    return {k: p - lr * grads[k] for k, p in params.items()}


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> OptimState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
              lr: float, cfg: OptimConfig) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update; returns new params and a new state."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        if state.m[k].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
        g = grads[k]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState(new_m, new_v, t)


# -- tasks ---------------------------------------------------------------------

class Batch(NamedTuple):
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray


class TaskKind(str, enum.Enum):
    COPY = "copy"
    REVERSE = "reverse"


@dataclass
class SyntheticTask:
    """Random token strings over ``1..vocab-1``; id 0 is the decoder start token.

    Every batch shares one length drawn from ``[min_len, max_len]``, so no
    padding is needed. Batch ``k`` depends only on ``(seed, k)``.
    """

    kind: TaskKind = TaskKind.COPY
    vocab: int = 12
    min_len: int = 4
    max_len: int = 8
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        self.kind = TaskKind(str(getattr(self.kind, "value", self.kind)).lower())
        if self.vocab < 3 or not 1 <= self.min_len <= self.max_len:
            raise ValueError("need vocab >= 3 and 1 <= min_len <= max_len")

    def target(self, src: np.ndarray) -> np.ndarray:
        return src.copy() if self.kind is TaskKind.COPY else src[..., ::-1].copy()

    def batch(self, k: int, batch_size: int | None = None) -> Batch:
        rng = stream(self.seed, f"batch/{k}")
        n = batch_size or self.batch_size
        length = int(rng.integers(self.min_len, self.max_len + 1))
        src = rng.integers(1, self.vocab, size=(n, length))
        tgt = self.target(src)
        tgt_in = np.concatenate([np.full((n, 1), BOS), tgt[:, :-1]], axis=1)
        return Batch(src, tgt_in, tgt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


# -- training loop -------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    loss: float
    lr: float
    gnorm: float


@dataclass
class TrainRecord:
    steps: list[StepLog] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr", "gnorm"])
            for s in self.steps:
                w.writerow([s.step, f"{s.loss:.17e}", f"{s.lr:.17e}", f"{s.gnorm:.17e}"])


def compute_grads(model: Model, batch: Batch, train: bool = False, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients of every trainable parameter (zeros where unused)."""
    model.zero_grad()
    with ad.Tape():
        loss, _ = model_forward(model, *batch, train=train, rng=rng)
        ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in model.trainable().items()}
    return loss.item(), grads


def save_checkpoint(path, model: Model, state: OptimState | None, step: int, optim: OptimConfig | None = None) -> None:
    meta = {"step": step, "optim_t": state.t if state else 0}
    if optim is not None:
        meta["optim"] = optim.to_dict()
    extra = {}
    if state is not None:
        for k in state.m:
            extra["m/" + k] = state.m[k]
            extra["v/" + k] = state.v[k]
    save_model(model, path, meta, extra)


def load_checkpoint(path) -> tuple[Model, OptimState | None, int]:
    model, meta, extra = load_model(path)
    state = None
    if extra:
        m = {k[2:]: v for k, v in extra.items() if k.startswith("m/")}
        v = {k[2:]: a for k, a in extra.items() if k.startswith("v/")}
        state = OptimState(m, v, int(meta.get("optim_t", 0)))
    return model, state, int(meta.get("step", 0))


def train(model: Model, task: SyntheticTask, cfg: OptimConfig, steps: int,
          checkpoint_every: int | None = None, out_dir=None, *, state: OptimState | None = None,
          start_step: int = 0, train_mode: bool = True, dropout_seed: int = 0,
          on_epoch: Callable[[int, Model], None] | None = None,
          on_step: Callable[[int, dict[str, np.ndarray], float], None] | None = None) -> TrainRecord:
    """Teacher-forced training on ``task`` for steps ``start_step+1 .. steps``.

    Batch ``k`` and its dropout masks depend only on ``(task.seed, k)`` and
    ``(dropout_seed, k)``, so a run resumed from a checkpoint reproduces the
    uninterrupted run exactly. Training stops early when the loss becomes
    non-finite or exceeds 10x the first loss after warmup.

    ``on_step(k, grads, lr)`` sees every step's gradients before the update;
    ``on_epoch(e, model)`` runs at start (e = 0) and every ``checkpoint_every``
    steps; checkpoint files are written only when ``out_dir`` is given.
    """
    if task.vocab > min(model.config.src_vocab, model.config.tgt_vocab):
        raise ValueError("task vocabulary exceeds the model's")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.trainable()
    if cfg.kind is OptimKind.ADAM and state is None:
        state = OptimState.zeros_like({k: t.data for k, t in params.items()})
    record = TrainRecord()
    first_loss = None
    if on_epoch is not None and start_step == 0:
        on_epoch(0, model)
    for k in range(start_step + 1, steps + 1):
        batch = task.batch(k)
        rng = stream(dropout_seed, f"dropout/{k}") if train_mode and model.config.dropout else None
        try:
            loss, grads = compute_grads(model, batch, train_mode, rng)
        except ad.NumericOverflowError:
            record.diverged, record.diverged_at = True, k
            break
        if first_loss is None:
            first_loss = loss
        lr = lr_schedule(k, cfg)
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        record.steps.append(StepLog(k, loss, lr, gnorm))
        if k > cfg.warmup_steps and loss > 10.0 * first_loss:
            record.diverged, record.diverged_at = True, k
            break
        if on_step is not None:
            on_step(k, grads, lr)
        current = {n: t.data for n, t in params.items()}
        if cfg.kind is OptimKind.SGD:
            if cfg.weight_decay:
                grads = {n: g + cfg.weight_decay * current[n] for n, g in grads.items()}
            new = sgd_step(current, grads, lr)
        else:
            new, state = adam_step(current, grads, state, lr, cfg)
        bad = [n for n, a in new.items() if not np.isfinite(a).all()]
        if bad:
            record.diverged, record.diverged_at = True, k
            break
        for n, a in new.items():
            params[n].data = a
        if checkpoint_every and k % checkpoint_every == 0:
            if out is not None:
                path = out / f"ckpt_{k:07d}.bin"
                save_checkpoint(path, model, state, k, cfg)
                record.checkpoints.append(str(path))
            if on_epoch is not None:
                on_epoch(k // checkpoint_every, model)
    if out is not None:
        record.write_csv(out / "train_log.csv")
    return record


def resume(path, task: SyntheticTask, cfg: OptimConfig, steps: int, **kw) -> tuple[Model, TrainRecord]:
    model, state, step = load_checkpoint(path)
    return model, train(model, task, cfg, steps, state=state, start_step=step, **kw)
