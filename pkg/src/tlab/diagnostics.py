"""Measurements on models: gradient histograms, vanishing ratios, layer dependency (beta),
output shift under parameter perturbation, and gradient/update balance across epochs."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import (ATTENTION_WEIGHTS, FFN_WEIGHTS, ActivationTrace, ArchVariant, Model,
                     ModelConfig, SubLayerKind, Wiring, embed, encoder_only_forward, model_forward,
                     sublayer_forward)
from .oracle import shift_recursion
from .init import InitScheme, admin_initialize, admin_profile, build_model
from .rng import stream
from .trainer import OptimConfig, OptimState, SyntheticTask, adam_step, compute_grads, train

# -- gradient norms ------------------------------------------------------------


@dataclass
class GradRow:
    side: str
    layer: int
    sublayer: int
    kind: str
    l2: float
    rel: float = 0.0


@dataclass
class GradReport:
    rows: list[GradRow]
    # squared-norm / count at x_0 .. x_S per side
    var_dx: dict[str, np.ndarray] = field(default_factory=dict)
    kinds: dict[str, list[str]] = field(default_factory=dict)

    def side(self, name: str) -> list[GradRow]:
        return [r for r in self.rows if r.side == name]


def _layer_of(i: int, side: str) -> int:
    per = 2 if side == "encoder" else 3
    return (i - 1) // per + 1


def traced_backward(model: Model, batch) -> tuple[float, tuple[ActivationTrace, ActivationTrace]]:
    """Forward + backward with the gradient retained at every sub-layer output."""
    model.zero_grad()
    with ad.Tape():
        loss, traces = model_forward(model, *batch, train=False)
        for tr in traces:
            for e in tr.entries:
                e.x.retain_grad()
        ad.backward(loss)
    return loss.item(), traces


def grad_histogram(model: Model, batch) -> GradReport:
    """Norms of dL/dx_i at every sub-layer output, scaled by the largest one."""
    _, traces = traced_backward(model, batch)
    rows, var_dx, kinds = [], {}, {}
    for tr in traces:
        g = [e.x.grad if e.x.grad is not None else np.zeros_like(e.x.data) for e in tr.entries]
        var_dx[tr.side] = np.array([float((a * a).sum()) / a.size for a in g])
        kinds[tr.side] = ["input"] + [e.kind.value for e in tr.sublayers]
        for e, a in zip(tr.sublayers, g[1:]):
            rows.append(GradRow(tr.side, _layer_of(e.index, tr.side), e.index, e.kind.value,
                                float(np.sqrt((a * a).sum()))))
    top = max(r.l2 for r in rows)
    for r in rows:
        r.rel = r.l2 / top
    return GradReport(rows, var_dx, kinds)


@dataclass
class RatioRow:
    index: int
    kind: str
    ratio: float
    verdict: str


def vanishing_check(model: Model, batch, side: str = "encoder", tol: float = 0.05,
                    report: GradReport | None = None) -> list[RatioRow]:
    """Var[dx_{i-1}] / Var[dx_i] for every sub-layer ``i`` of one stack.

    The verdict is ``"vanishing"`` when the ratio across an encoder-attention
    sub-layer falls below ``1 - tol``.
    """
    report = report or grad_histogram(model, batch)
    v = report.var_dx[side]
    kinds = report.kinds[side]
    out = []
    for i in range(1, len(v)):
        r = v[i - 1] / v[i] if v[i] > 0 else math.inf
        vanish = kinds[i] == SubLayerKind.ENCODER_ATTENTION.value and r < 1.0 - tol
        out.append(RatioRow(i, kinds[i], float(r), "vanishing" if vanish else "ok"))
    return out


def cumulative_decay(report: GradReport, side: str = "decoder") -> float:
    """Var[dx_S] / Var[dx_1]: the product of all adjacent ratios above sub-layer 1."""
    v = report.var_dx[side]
    return float(v[-1] / v[1])


@dataclass
class SeedSummary:
    """Median and interquartile range of a per-seed quantity."""

    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    samples: np.ndarray

    @classmethod
    def of(cls, samples) -> SeedSummary:
        a = np.asarray(samples, dtype=float)
        q25, med, q75 = np.percentile(a, [25, 50, 75], axis=0)
        return cls(med, q25, q75, a)


def seeded_config(config: ModelConfig, seed: int, **over) -> ModelConfig:
    return ModelConfig.from_dict({**config.to_dict(), "seed": int(seed), **over})


def ratio_study(config: ModelConfig, batch_for_seed, seeds, scheme: InitScheme | None = None,
                tol: float = 0.05) -> dict[str, SeedSummary | list]:
    """Vanishing ratios, relative norms and decoder decay over several initializations.

    ``batch_for_seed(s)`` supplies the batch used with seed ``s``.
    """
    ratios = {"encoder": [], "decoder": []}
    rel = {"encoder": [], "decoder": []}
    decay, verdicts = [], []
    for s in seeds:
        batch = batch_for_seed(s)
        model = build_model(seeded_config(config, s), scheme, batch)
        report = grad_histogram(model, batch)
        for side in ratios:
            rows = vanishing_check(model, batch, side, tol, report)
            ratios[side].append([r.ratio for r in rows])
            rel[side].append([r.rel for r in report.side(side)])
            verdicts += [(int(s), side, r.index) for r in rows if r.verdict == "vanishing"]
        decay.append(cumulative_decay(report, "decoder"))
    out: dict[str, SeedSummary | list] = {f"ratio/{k}": SeedSummary.of(v) for k, v in ratios.items()}
    out.update({f"rel/{k}": SeedSummary.of(v) for k, v in rel.items()})
    out["decay/decoder"] = SeedSummary.of(decay)
    out["vanishing"] = verdicts
    return out


# -- layer dependency ----------------------------------------------------------


@dataclass
class BetaMatrix:
    """``beta[i, j]``: weight of normalized residual output ``j`` in normalized output ``i``.

    Row/column 0 stand for the stack input (embeddings); rows are sub-layers
    1..S. ``raw_row_sums`` are the sums of squares before renormalization.
    """

    beta: np.ndarray
    raw_row_sums: np.ndarray
    row_normalized: bool = True

    @property
    def diag_sq(self) -> np.ndarray:
        """beta_{i,i}^2 for i = 1..S."""
        d = np.diag(self.beta)[1:]
        return d * d

    def rows(self):
        n = self.beta.shape[0]
        for i in range(1, n):
            for j in range(0, i + 1):
                yield i, j, float(self.beta[i, j]), float(self.raw_row_sums[i])


def beta_from_trace(trace: ActivationTrace, subs) -> BetaMatrix:
    """Dependency matrix of one traced stack.

    Pre-LN uses the closed form ``sqrt(Var[a_j]) / sqrt(Var[x_i])``. Post-LN and
    Admin follow the normalizations forward::

        c_ii = rms(gamma_i) * sqrt(Var[a_i]) / sqrt(Var[b_i])
        c_ij = c_{i-1,j} * rms(omega_i) * rms(gamma_i) / sqrt(Var[b_i])

    starting from ``c_00 = sqrt(Var[x_0])``; each row is then rescaled to unit
    sum of squares.
    """
    s = len(trace)
    raw = np.zeros((s + 1, s + 1))
    var_x0 = trace[0].var_x
    if trace.wiring is Wiring.PRE:
        raw[0, 0] = 1.0
        for i in range(1, s + 1):
            vx = trace[i].var_x
            raw[i, 0] = math.sqrt(var_x0 / vx)
            for j in range(1, i + 1):
                raw[i, j] = math.sqrt(trace[j].var_a / vx)
    else:
        raw[0, 0] = math.sqrt(var_x0)
        for i in range(1, s + 1):
            e = trace[i]
            vb = e.var_b
            if vb <= 0:
                raise ValueError(f"sub-layer {i} has zero Var[b]")
            g = _rms(subs[i - 1].ln_gamma.data) / math.sqrt(vb)
            w = _rms(subs[i - 1].omega.data) if trace.wiring is Wiring.ADMIN else 1.0
            raw[i, :i] = raw[i - 1, :i] * w * g
            raw[i, i] = math.sqrt(e.var_a) * g
        raw[0, 0] = 1.0
    sums = (raw * raw).sum(axis=1)
    beta = raw / np.sqrt(sums)[:, None]
    return BetaMatrix(beta, sums)


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v)))


def estimate_beta(model: Model, batch, side: str = "encoder") -> BetaMatrix:
    with ad.no_tape():
        _, (enc, dec) = model_forward(model, *batch, train=False)
    trace, subs = (enc, model.encoder) if side == "encoder" else (dec, model.decoder)
    return beta_from_trace(trace, subs)


def median_beta(matrices: list[BetaMatrix]) -> BetaMatrix:
    """Entry-wise median over seeds (rows are no longer exactly normalized)."""
    beta = np.median(np.array([m.beta for m in matrices]), axis=0)
    sums = np.median(np.array([m.raw_row_sums for m in matrices]), axis=0)
    return BetaMatrix(beta, sums, row_normalized=False)


def beta_study(config: ModelConfig, batch, seeds, scheme: InitScheme | None = None,
               side: str = "encoder") -> list[BetaMatrix]:
    """Initialization-time dependency matrices for several seeds (Admin models are profiled)."""
    out = []
    for s in seeds:
        model = build_model(seeded_config(config, s), scheme, batch)
        if model.variant is ArchVariant.ADMIN:
            admin_initialize(model, admin_profile(model, batch))
        out.append(estimate_beta(model, batch, side))
    return out


def coefficient_of_variation(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std() / x.mean())


# -- output shift ----------------------------------------------------------------


class PerturbKind(str, enum.Enum):
    RANDOM_NOISE = "random"
    ADAM_UPDATE = "adam"


@dataclass
class PerturbSpec:
    kind: PerturbKind = PerturbKind.RANDOM_NOISE
    epsilon: float = 0.1
    lr: float = 1e-3
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(warmup_steps=0))
    seed: int = 0

    def __post_init__(self):
        self.kind = PerturbKind(str(getattr(self.kind, "value", self.kind)).lower())
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass
class ShiftCurve:
    variant: str
    ns: list[int]
    shifts: list[float]
    per_seed: dict[int, list[float]]
    transform: str
    slope: float
    intercept: float
    r2: float


def fit_r2(points, x_transform: str = "identity") -> tuple[float, float, float]:
    """Least-squares line through ``(x, y)`` points; returns slope, intercept, R^2.

    ``x_transform="log"`` fits against ``ln x``. A constant ``y`` gives R^2 = 0.
    """
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    if x_transform == "log":
        x = np.log(x)
    elif x_transform != "identity":
        raise ValueError(f"unknown transform {x_transform!r}")
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("fit needs at least two distinct x values")
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(yc @ yc)
    if ss_tot == 0.0:
        return slope, intercept, 0.0
    resid = y - (slope * x + intercept)
    return slope, intercept, 1.0 - float(resid @ resid) / ss_tot


SHIFT_WEIGHTS = ATTENTION_WEIGHTS + FFN_WEIGHTS


def shift_model(template: ModelConfig, n_sublayers: int, seed: int, batch,
                scheme: InitScheme | None = None) -> Model:
    """An initialized encoder stack of ``n_sublayers`` (Admin models are profiled)."""
    if n_sublayers % 2:
        raise ValueError("encoder stacks have an even number of sub-layers")
    cfg = ModelConfig.from_dict({**template.to_dict(), "n_enc": n_sublayers // 2, "n_dec": 1,
                                 "seed": int(seed), "dropout": 0.0})
    model = build_model(cfg, scheme, batch)
    if cfg.variant is ArchVariant.ADMIN:
        admin_initialize(model, admin_profile(model, batch))
    return model


def perturbation(model: Model, spec: PerturbSpec, batch) -> dict[str, np.ndarray]:
    """delta for every encoder weight matrix."""
    names = [k for k in model.params if k.startswith("enc.") and k.rsplit(".", 1)[-1] in SHIFT_WEIGHTS]
    if spec.kind is PerturbKind.RANDOM_NOISE:
        rng = stream(spec.seed, f"perturb/{model.config.seed}/{len(model.encoder)}")
        return {k: rng.standard_normal(model.params[k].shape)
                * spec.epsilon * math.sqrt(model.init_vars[k]) for k in names}
    _, grads = compute_grads(model, batch)
    params = {k: model.params[k].data for k in names}
    state = OptimState.zeros_like(params)
    new, _ = adam_step(params, {k: grads[k] for k in names}, state, spec.lr, spec.optim)
    return {k: new[k] - params[k] for k in names}


def encoder_output(model: Model, x0: np.ndarray) -> np.ndarray:
    with ad.no_tape():
        out, _ = encoder_only_forward(model, ad.Tensor(x0))
    return out.data


def output_shift_single(model: Model, spec: PerturbSpec, batch) -> float:
    """|F(x0, W) - F(x0, W + delta)|_2^2 for the encoder stack of ``model``."""
    with ad.no_tape():
        x0 = embed(model, model.params["src_emb"], batch[0]).data
    base = encoder_output(model, x0)
    delta = perturbation(model, spec, batch)
    saved = {k: model.params[k].data for k in delta}
    try:
        for k, d in delta.items():
            model.params[k].data = saved[k] + d
        moved = encoder_output(model, x0)
    finally:
        for k, v in saved.items():
            model.params[k].data = v
    diff = base - moved
    return float((diff * diff).sum())


def output_shift(template: ModelConfig, n_list, perturb: PerturbSpec, seeds, batch,
                 scheme: InitScheme | None = None, transform: str | None = None) -> ShiftCurve:
    """Average output shift per stack depth, with a least-squares fit.

    Post-LN is fitted against N, Pre-LN and Admin against log N unless
    ``transform`` says otherwise.
    """
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 3:
        raise ValueError("need at least three depths to fit")
    per_seed: dict[int, list[float]] = {}
    means = []
    for n in n_list:
        vals = []
        for s in seeds:
            model = shift_model(template, n, s, batch, scheme)
            vals.append(output_shift_single(model, perturb, batch))
        per_seed[n] = vals
        means.append(float(np.mean(vals)))
    if transform is None:
        transform = "identity" if template.variant is ArchVariant.POSTLN else "log"
    slope, intercept, r2 = fit_r2(list(zip(n_list, means)), transform)
    return ShiftCurve(template.variant.value, n_list, means, per_seed, transform, slope, intercept, r2)


def branch_shift_constants(model: Model, delta: dict[str, np.ndarray], batch) -> tuple[np.ndarray, BetaMatrix]:
    """Per sub-layer ``C_i``: squared change of the normalized branch output under its own delta.

    Each branch is evaluated on the unperturbed input ``x_{i-1}``; the output
    is scaled by the unperturbed branch standard deviation.
    """
    cfg = model.config
    kw = dict(n_heads=cfg.n_heads, temperature=cfg.temperature)
    out = []
    with ad.no_tape():
        x0 = embed(model, model.params["src_emb"], batch[0])
        _, trace = encoder_only_forward(model, x0)
        for i, sub in enumerate(model.encoder, start=1):
            x_in = trace[i - 1].x
            _, base = sublayer_forward(sub.wiring, sub, x_in, None, **kw)
            own = {k: d for k, d in delta.items() if k.startswith(f"enc.{i}.")}
            saved = {k: model.params[k].data for k in own}
            try:
                for k, d in own.items():
                    model.params[k].data = saved[k] + d
                _, moved = sublayer_forward(sub.wiring, sub, x_in, None, **kw)
            finally:
                for k, v in saved.items():
                    model.params[k].data = v
            diff = (moved.a.data - base.a.data) / math.sqrt(base.var_a)
            out.append(float((diff * diff).sum()))
    return np.array(out), beta_from_trace(trace, model.encoder)


def shift_crosscheck(model: Model, spec: PerturbSpec, batch) -> tuple[float, float]:
    """Measured output shift and the ``sum_i beta_ii^2 C_i`` prediction for one encoder stack."""
    measured = output_shift_single(model, spec, batch)
    c, beta = branch_shift_constants(model, perturbation(model, spec, batch), batch)
    return measured, shift_recursion(beta.diag_sq, c)


# -- gradient / update balance -------------------------------------------------------


@dataclass
class ParamNormSeries:
    """Per epoch and attention matrix: gradient and update norms scaled by the epoch maximum."""

    names: list[str]
    grad_norm: np.ndarray  # (epochs, matrices)
    update_norm: np.ndarray

    @property
    def grad_rel(self) -> np.ndarray:
        return self.grad_norm / self.grad_norm.max(axis=1, keepdims=True)

    @property
    def update_rel(self) -> np.ndarray:
        return self.update_norm / self.update_norm.max(axis=1, keepdims=True)

    def spreads(self) -> tuple[np.ndarray, np.ndarray]:
        """max/min over matrices, per epoch, for gradients and updates."""
        g, u = self.grad_norm, self.update_norm
        return g.max(axis=1) / g.min(axis=1), u.max(axis=1) / u.min(axis=1)

    def rows(self):
        gr, ur = self.grad_rel, self.update_rel
        for t in range(gr.shape[0]):
            for n, name in enumerate(self.names):
                layer, matrix = name.rsplit(".", 1)
                yield t, layer, matrix, float(gr[t, n]), float(ur[t, n])


def attention_matrix_names(model: Model) -> list[str]:
    out = []
    for prefix, subs in (("enc", model.encoder), ("dec", model.decoder)):
        for i, sub in enumerate(subs, start=1):
            if sub.kind is not SubLayerKind.FEED_FORWARD:
                out += [f"{prefix}.{i}.{w}" for w in ATTENTION_WEIGHTS]
    return out


def track_param_norms(checkpoints: list[dict[str, np.ndarray]], grads: list[dict[str, np.ndarray]],
                      names: list[str]) -> ParamNormSeries:
    """Epoch ``t`` pairs the gradient at checkpoint ``t`` with ``|W_{t+1} - W_t|``."""
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    epochs = len(checkpoints) - 1
    g = np.array([[np.linalg.norm(grads[t][n]) for n in names] for t in range(epochs)])
    u = np.array([[np.linalg.norm(checkpoints[t + 1][n] - checkpoints[t][n]) for n in names]
                  for t in range(epochs)])
    return ParamNormSeries(list(names), g, u)


class BalanceTracker:
    """Training hooks that collect what ``track_param_norms`` needs.

    The gradient of an epoch is the mean of its per-step gradients, so that
    under SGD with a constant learning rate the epoch's update is exactly
    ``-lr * steps * gradient``.
    """

    def __init__(self, names: list[str]):
        self.names = list(names)
        self.snapshots: list[dict[str, np.ndarray]] = []
        self.grads: list[dict[str, np.ndarray]] = []
        self._acc = {n: 0.0 for n in self.names}
        self._count = 0

    def on_step(self, k: int, grads: dict[str, np.ndarray], lr: float) -> None:
        for n in self.names:
            self._acc[n] = self._acc[n] + grads[n]
        self._count += 1

    def on_epoch(self, epoch: int, model: Model) -> None:
        self.snapshots.append({n: model.params[n].data.copy() for n in self.names})
        if epoch > 0:
            self.grads.append({n: self._acc[n] / self._count for n in self.names})
        self._acc = {n: 0.0 for n in self.names}
        self._count = 0

    def series(self) -> ParamNormSeries:
        return track_param_norms(self.snapshots, self.grads, self.names)


def balance_run(model: Model, task: SyntheticTask, cfg: OptimConfig, epochs: int,
                steps_per_epoch: int) -> ParamNormSeries:
    """Train for ``epochs * steps_per_epoch`` steps and report per-epoch norm balance."""
    tracker = BalanceTracker(attention_matrix_names(model))
    record = train(model, task, cfg, epochs * steps_per_epoch, checkpoint_every=steps_per_epoch,
                   on_epoch=tracker.on_epoch, on_step=tracker.on_step)
    if record.diverged:
        raise ad.NumericOverflowError(f"training diverged at step {record.diverged_at}")
    return tracker.series()


# -- CSV emitters ----------------------------------------------------------------

def _fmt(x) -> str:
    return f"{x:.17e}" if isinstance(x, float) else str(x)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_grad_hist(path, report: GradReport) -> None:
    write_csv(path, ["side", "layer", "sublayer", "kind", "l2", "rel"],
              [(r.side, r.layer, r.sublayer, r.kind, r.l2, r.rel) for r in report.rows])


def write_beta(path, matrix: BetaMatrix) -> None:
    write_csv(path, ["i", "j", "beta", "raw_row_sum"], matrix.rows())


def write_shift(path, curves: list[ShiftCurve]) -> None:
    rows = []
    for c in curves:
        for n in c.ns:
            rows += [(c.variant, n, s, v) for s, v in enumerate(c.per_seed[n])]
    write_csv(path, ["variant", "N", "seed", "shift"], rows)


def write_fit(path, curves: list[ShiftCurve]) -> None:
    write_csv(path, ["variant", "transform", "slope", "intercept", "r2"],
              [(c.variant, c.transform, c.slope, c.intercept, c.r2) for c in curves])


def write_param_norms(path, series: ParamNormSeries) -> None:
    write_csv(path, ["epoch", "layer", "matrix", "grad_rel", "update_rel"], series.rows())
