"""Standard initialization, Admin profiling/initialization and reparameterization."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocks import (ArchVariant, Model, ModelConfig, SubLayerKind, embed, encoder_forward,
                     model_forward, sublayer_forward)
from .rng import stream


class InitFamily(str, enum.Enum):
    XAVIER_UNIFORM = "xavier_uniform"
    SCALED_UNIFORM = "scaled_uniform"


@dataclass
class InitScheme:
    """Zero-mean uniform initialization of every weight matrix.

    ``xavier_uniform`` draws with variance ``gain**2 * 2 / (fan_in + fan_out)``;
    ``scaled_uniform`` with ``gain**2 / fan_in``. ``role_gains`` multiplies the
    gain for particular weight roles (``"wq"``, ``"w2"``, ``"out_proj"``, ...).
    Embedding tables use variance ``1 / d_model`` so that the sqrt(d) scaled
    embeddings have unit variance.

    When ``branch_var`` is set, each residual branch's output matrix
    (``w2`` or ``wv2``) is then rescaled, bottom-up on a calibration batch,
    so that the branch output has exactly that variance. Every matrix stays
    i.i.d. zero-mean symmetric; only its scale changes.
    """

    family: InitFamily = InitFamily.XAVIER_UNIFORM
    gain: float = 1.0
    role_gains: dict[str, float] = field(default_factory=dict)
    branch_var: float | None = None

    def __post_init__(self):
        self.family = InitFamily(self.family)

    def variance(self, role: str, shape: tuple[int, int]) -> float:
        fan_in, fan_out = shape
        g = self.gain * self.role_gains.get(role, 1.0)
        if self.family is InitFamily.XAVIER_UNIFORM:
            return g * g * 2.0 / (fan_in + fan_out)
        return g * g / fan_in


def _role(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def init_standard(model: Model, scheme: InitScheme | None = None,
                  rng: np.random.Generator | None = None, batch=None) -> Model:
    """Draw all weights i.i.d. from the scheme; gamma = 1, nu = 0, omega = 1.

    The variance used for each matrix is stored in ``model.init_vars``.
    ``batch`` (``src, tgt_in, tgt_out``) is required for calibrated schemes.
    """
    scheme = scheme or InitScheme()
    if rng is None:
        rng = stream(model.config.seed, "init")
    d = model.config.d_model
    model.init_vars = {}
    model.init_scheme = scheme
    for name, t in model.params.items():
        role = _role(name)
        if role == "ln_gamma" or role == "omega":
            t.data = np.ones(t.shape)
            continue
        if role == "ln_nu":
            t.data = np.zeros(t.shape)
            continue
        var = 1.0 / d if role.endswith("emb") else scheme.variance(role, t.shape)
        bound = math.sqrt(3.0 * var)
        t.data = rng.uniform(-bound, bound, size=t.shape)
        model.init_vars[name] = var
    if scheme.branch_var is not None:
        if batch is None:
            raise ValueError("a calibrated init scheme needs a calibration batch")
        calibrate_branches(model, batch, scheme.branch_var)
    return model


def calibrate_branches(model: Model, batch, target: float) -> list[float]:
    """Rescale each branch's output matrix so that Var[a_i] == target, bottom-up.

    Returns the scale factors applied, encoder first.
    """
    src, tgt_in, _ = batch
    cfg = model.config
    kw = dict(n_heads=cfg.n_heads, temperature=cfg.temperature)
    factors = []
    with ad.no_tape():
        for side, subs, tokens in (("encoder", model.encoder, src), ("decoder", model.decoder, tgt_in)):
            emb = model.params["src_emb" if side == "encoder" else "tgt_emb"]
            x = embed(model, emb, tokens)
            enc_out = None
            if side == "decoder":
                enc_out, _ = encoder_forward(model, src)
            for i, sub in enumerate(subs, start=1):
                out_name = "w2" if sub.kind is SubLayerKind.FEED_FORWARD else "wv2"
                _, entry = sublayer_forward(sub.wiring, sub, x, enc_out, causal=side == "decoder", **kw)
                var_a = entry.var_a
                if var_a <= 0:
                    raise ValueError(f"{side} sub-layer {i} has a dead branch; cannot calibrate")
                factor = math.sqrt(target / var_a)
                sub[out_name].data = sub[out_name].data * factor
                key = f"{side[:3]}.{i}.{out_name}"
                model.init_vars[key] = model.init_vars[key] * factor * factor
                factors.append(factor)
                x, _ = sublayer_forward(sub.wiring, sub, x, enc_out, causal=side == "decoder", **kw)
    return factors


def build_model(config: ModelConfig, scheme: InitScheme | None = None, batch=None) -> Model:
    """A freshly initialized model whose draws depend only on ``config.seed``."""
    return init_standard(Model(config), scheme, stream(config.seed, "init"), batch)


@dataclass
class ProfileRecord:
    """Per-stack residual-branch statistics from one profiling pass."""

    encoder_var_f: list[float]
    encoder_var_b: list[float]
    decoder_var_f: list[float]
    decoder_var_b: list[float]
    batch_shape: tuple[int, int]
    tokens: int

    def rows(self):
        for side, vf, vb in (("encoder", self.encoder_var_f, self.encoder_var_b),
                             ("decoder", self.decoder_var_f, self.decoder_var_b)):
            for i, (f, b) in enumerate(zip(vf, vb), start=1):
                yield side, i, f, b

    def save(self, path) -> None:
        lines = [f"# batch={self.batch_shape[0]}x{self.batch_shape[1]} tokens={self.tokens}",
                 "side,index,var_f,var_b"]
        lines += [f"{s},{i},{f!r},{b!r}" for s, i, f, b in self.rows()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> ProfileRecord:
        text = Path(path).read_text().splitlines()
        head = dict(kv.split("=") for kv in text[0].lstrip("# ").split())
        b, l = (int(v) for v in head["batch"].split("x"))
        data = {"encoder": ([], []), "decoder": ([], [])}
        for line in text[2:]:
            side, _, f, vb = line.split(",")
            data[side][0].append(float(f))
            data[side][1].append(float(vb))
        return cls(data["encoder"][0], data["encoder"][1], data["decoder"][0], data["decoder"][1],
                   (b, l), int(head["tokens"]))


def admin_profile(model: Model, batch) -> ProfileRecord:
    """One dropout-free forward pass recording Var[f_i(x_{i-1})] per sub-layer.

    ``batch`` is ``(src, tgt_in, tgt_out)``; parameters are left untouched.
    """
    src, tgt_in, tgt_out = batch
    src = np.atleast_2d(src)
    if src.size == 0:
        raise ValueError("profiling batch is empty")
    with ad.no_tape():
        _, (enc, dec) = model_forward(model, src, tgt_in, tgt_out, train=False)
    return ProfileRecord(
        [float(np.var(e.a.data)) for e in enc.sublayers],
        [e.var_b for e in enc.sublayers],
        [float(np.var(e.a.data)) for e in dec.sublayers],
        [e.var_b for e in dec.sublayers],
        tuple(src.shape), int(src.size + np.asarray(tgt_in).size),
    )


def omega_from_profile(var_f: list[float]) -> list[float]:
    """Shortcut scales ``max(1, sqrt(sum_{j<i} var_f[j]))`` for i = 1..S."""
    out, acc = [], 0.0
    for v in var_f:
        out.append(max(1.0, math.sqrt(acc)))
        acc += v
    return out


def admin_initialize(model: Model, profile: ProfileRecord, scheme: InitScheme | None = None,
                     rng: np.random.Generator | None = None, batch=None) -> Model:
    """Set every omega from the profile; with ``rng``, redraw all other parameters first.

    Without ``rng`` the profiled weights are kept, which is the same as
    redrawing them with the profiling seed.
    """
    if model.variant is not ArchVariant.ADMIN:
        raise ValueError("admin_initialize needs an Admin-wired model")
    if (len(profile.encoder_var_f) != len(model.encoder)
            or len(profile.decoder_var_f) != len(model.decoder)):
        raise ValueError("profile does not cover every sub-layer of the model")
    if rng is not None:
        init_standard(model, scheme or getattr(model, "init_scheme", None), rng, batch)
    for subs, var_f in ((model.encoder, profile.encoder_var_f), (model.decoder, profile.decoder_var_f)):
        for sub, w in zip(subs, omega_from_profile(var_f)):
            sub.omega.data = np.full(sub.omega.shape, w)
    return model


def build_admin_model(config: ModelConfig, batch, scheme: InitScheme | None = None) -> tuple[Model, ProfileRecord]:
    """Profiling then initialization, as one call."""
    if ArchVariant.parse(config.variant) is not ArchVariant.ADMIN:
        raise ValueError("build_admin_model needs variant=admin")
    model = build_model(config, scheme, batch)
    profile = admin_profile(model, batch)
    return admin_initialize(model, profile), profile


_CONSUMER_ROWS = {
    SubLayerKind.FEED_FORWARD: ("w1",),
    SubLayerKind.SELF_ATTENTION: ("wq", "wk", "wv1"),
    SubLayerKind.ENCODER_ATTENTION: ("wq",),
}


def reparameterize(model: Model) -> Model:
    """Fold every omega into the layer norm feeding its sub-layer; return a Post-LN model.

    For sub-layer ``i`` the producing norm (that of sub-layer ``i-1``) gets
    ``gamma *= omega_i`` and ``nu *= omega_i``, and the input-side rows of
    the branch weights that read ``x_{i-1}`` are divided by ``omega_i``.
    """
    if model.variant is not ArchVariant.ADMIN:
        raise ValueError("reparameterize expects an Admin model")
    cfg = ModelConfig.from_dict({**model.config.to_dict(), "variant": ArchVariant.POSTLN.value})
    out = Model(cfg)
    state = model.state_dict()
    for prefix, subs in (("enc", model.encoder), ("dec", model.decoder)):
        for i, sub in enumerate(subs, start=1):
            w = state[f"{prefix}.{i}.omega"]
            if i == 1:
                if not np.array_equal(w, np.ones_like(w)):
                    raise ValueError(f"{prefix} sub-layer 1 has omega != 1 and no layer norm to fold into")
                continue
            prev = f"{prefix}.{i - 1}."
            state[prev + "ln_gamma"] = state[prev + "ln_gamma"] * w
            state[prev + "ln_nu"] = state[prev + "ln_nu"] * w
            for name in _CONSUMER_ROWS[sub.kind]:
                key = f"{prefix}.{i}.{name}"
                state[key] = state[key] / w[:, None]
            state[f"{prefix}.{i}.omega"] = np.ones_like(w)
    out.load_state_dict(state)
    for attr in ("init_vars", "init_scheme"):
        if hasattr(model, attr):
            setattr(out, attr, getattr(model, attr))
    return out


__all__ = [
    "InitFamily", "InitScheme", "init_standard", "build_model", "ProfileRecord", "admin_profile",
    "omega_from_profile", "admin_initialize", "build_admin_model", "reparameterize",
]
