"""Encoder-decoder Transformers with Post-LN, Pre-LN, Admin and hybrid wirings.

Sub-layer ``i`` computes a residual-branch output ``a_i = f_i(.)`` and then

* Post-LN: ``x_i = LN(x_{i-1} + a_i)`` with ``a_i = f_i(x_{i-1})``
* Pre-LN:  ``x_i = x_{i-1} + a_i``      with ``a_i = f_i(LN(x_{i-1}))``
* Admin:   ``x_i = LN(x_{i-1} * omega_i + a_i)``

``b_i`` denotes the pre-normalization sum of the Post-LN/Admin forms. Every
forward call can record ``(a_i, b_i, x_i)`` for each sub-layer in an
:class:`ActivationTrace`.
"""
from __future__ import annotations

import enum
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"TLABCKPT"
CHECKPOINT_VERSION = 1


class ArchVariant(str, enum.Enum):
    POSTLN = "postln"
    PRELN = "preln"
    ADMIN = "admin"
    HYBRID = "hybrid"  # Post-LN encoder, Pre-LN decoder

    @classmethod
    def parse(cls, name: str | ArchVariant) -> ArchVariant:
        if isinstance(name, cls):
            return name
        aliases = {"post-ln": "postln", "pre-ln": "preln",
                   "hybridpostencpredec": "hybrid", "post_ln": "postln", "pre_ln": "preln"}
        key = str(name).strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown architecture variant {name!r}; "
                             f"expected one of {[v.value for v in cls]}") from None


class Wiring(str, enum.Enum):
    POST = "post"
    PRE = "pre"
    ADMIN = "admin"


class SubLayerKind(str, enum.Enum):
    SELF_ATTENTION = "self_att"
    ENCODER_ATTENTION = "enc_att"
    FEED_FORWARD = "ffn"


ENCODER_LAYER = (SubLayerKind.SELF_ATTENTION, SubLayerKind.FEED_FORWARD)
DECODER_LAYER = (SubLayerKind.SELF_ATTENTION, SubLayerKind.ENCODER_ATTENTION,
                 SubLayerKind.FEED_FORWARD)
ATTENTION_WEIGHTS = ("wq", "wk", "wv1", "wv2")
FFN_WEIGHTS = ("w1", "w2")


def stack_wirings(variant: ArchVariant) -> tuple[Wiring, Wiring]:
    """(encoder wiring, decoder wiring) for an architecture variant."""
    return {
        ArchVariant.POSTLN: (Wiring.POST, Wiring.POST),
        ArchVariant.PRELN: (Wiring.PRE, Wiring.PRE),
        ArchVariant.ADMIN: (Wiring.ADMIN, Wiring.ADMIN),
        ArchVariant.HYBRID: (Wiring.POST, Wiring.PRE),
    }[ArchVariant.parse(variant)]


@dataclass
class ModelConfig:
    variant: ArchVariant = ArchVariant.PRELN
    n_enc: int = 3
    n_dec: int = 3
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    src_vocab: int = 16
    tgt_vocab: int = 16
    max_len: int = 64
    dropout: float = 0.1
    temperature: bool = True
    seed: int = 0

    def __post_init__(self):
        self.variant = ArchVariant.parse(self.variant)
        for name in ("d_model", "n_heads", "d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_enc < 0 or self.n_dec < 0:
            raise ValueError("layer counts must be non-negative")
        if self.n_enc + self.n_dec == 0:
            raise ValueError("model needs at least one layer")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SubLayer:
    kind: SubLayerKind
    wiring: Wiring
    params: dict[str, Tensor]
    dropout: float = 0.0

    @property
    def ln_gamma(self) -> Tensor:
        return self.params["ln_gamma"]

    @property
    def ln_nu(self) -> Tensor:
        return self.params["ln_nu"]

    @property
    def omega(self) -> Tensor:
        return self.params["omega"]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


@dataclass
class TraceEntry:
    index: int
    kind: SubLayerKind | None
    x: Tensor
    a: Tensor | None = None
    b: Tensor | None = None

    @property
    def var_x(self) -> float:
        return float(np.var(self.x.data))

    @property
    def mean_x(self) -> float:
        return float(np.mean(self.x.data))

    @property
    def var_a(self) -> float:
        return float(np.var(self.a.data))

    @property
    def mean_a(self) -> float:
        return float(np.mean(self.a.data))

    @property
    def var_b(self) -> float:
        return float(np.var(self.b.data)) if self.b is not None else float("nan")


@dataclass
class ActivationTrace:
    """Entry 0 holds the stack input ``x_0``; entries 1..S the sub-layers."""

    side: str
    wiring: Wiring
    entries: list[TraceEntry] = field(default_factory=list)
    output: Tensor | None = None

    def __len__(self) -> int:
        return len(self.entries) - 1

    def __getitem__(self, i: int) -> TraceEntry:
        return self.entries[i]

    @property
    def sublayers(self) -> list[TraceEntry]:
        return self.entries[1:]


class Model:
    """Parameter container plus the architecture it is wired as."""

    def __init__(self, config: ModelConfig):
        self.config = config
        d = config.d_model
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

        def p(name: str, shape: tuple[int, ...]) -> Tensor:
            t = Tensor(np.zeros(shape), requires_grad=True, name=name)
            self.params[name] = t
            return t

        p("src_emb", (config.src_vocab, d))
        p("tgt_emb", (config.tgt_vocab, d))
        enc_w, dec_w = stack_wirings(config.variant)
        self.encoder = self._build_stack("enc", config.n_enc, ENCODER_LAYER, enc_w, p)
        self.decoder = self._build_stack("dec", config.n_dec, DECODER_LAYER, dec_w, p)
        self.enc_final_ln = self.dec_final_ln = None
        if enc_w is Wiring.PRE and config.n_enc:
            self.enc_final_ln = (p("enc_final.ln_gamma", (d,)), p("enc_final.ln_nu", (d,)))
        if dec_w is Wiring.PRE and config.n_dec:
            self.dec_final_ln = (p("dec_final.ln_gamma", (d,)), p("dec_final.ln_nu", (d,)))
        p("out_proj", (d, config.tgt_vocab))
        self._pos = _sinusoid(config.max_len, d)

    def _build_stack(self, prefix, n_layers, layout, wiring, p) -> list[SubLayer]:
        cfg = self.config
        d = cfg.d_model
        subs = []
        for layer in range(n_layers):
            for kind in layout:
                idx = len(subs) + 1
                base = f"{prefix}.{idx}."
                params = {}
                if kind is SubLayerKind.FEED_FORWARD:
                    params["w1"] = p(base + "w1", (d, cfg.d_ff))
                    params["w2"] = p(base + "w2", (cfg.d_ff, d))
                else:
                    for w in ATTENTION_WEIGHTS:
                        params[w] = p(base + w, (d, d))
                params["ln_gamma"] = p(base + "ln_gamma", (d,))
                params["ln_nu"] = p(base + "ln_nu", (d,))
                params["omega"] = p(base + "omega", (d,))
                if wiring is not Wiring.ADMIN or idx == 1:
                    # first omega cannot be folded into a preceding layer norm
                    self.frozen.add(base + "omega")
                subs.append(SubLayer(kind, wiring, params, cfg.dropout))
        return subs

    # -- parameter access -------------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> Model:
        other = Model(self.config)
        other.load_state_dict(self.state_dict())
        other.frozen = set(self.frozen)
        return other

    @property
    def variant(self) -> ArchVariant:
        return self.config.variant

    def positions(self, length: int) -> np.ndarray:
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len={self.config.max_len}")
        return self._pos[:length]


def _sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


# -- sub-layer modules ------------------------------------------------------

def ffn_forward(sub: SubLayer, x: Tensor, train: bool = False, rng=None) -> Tensor:
    if sub.kind is not SubLayerKind.FEED_FORWARD:
        raise ValueError(f"ffn_forward on a {sub.kind.value} sub-layer")
    if x.shape[-1] != sub["w1"].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match W1 {sub['w1'].shape}")
    h = ad.relu(ad.matmul(x, sub["w1"]))
    h = ad.dropout(h, sub.dropout, train, rng)
    return ad.matmul(h, sub["w2"])


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = t.shape
    t = ad.reshape(t, (*lead, length, n_heads, d // n_heads))
    return ad.swapaxes(t, -2, -3)


def attention_weights(sub: SubLayer, q: Tensor, kv: Tensor, n_heads: int, causal: bool = False,
                      temperature: bool = True) -> Tensor:
    """Row-softmax attention weights of shape ``(..., H, Lq, Lk)``."""
    qh = _split_heads(ad.matmul(q, sub["wq"]), n_heads)
    kh = _split_heads(ad.matmul(kv, sub["wk"]), n_heads)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2))
    if temperature:
        scores = ad.mul(scores, 1.0 / math.sqrt(q.shape[-1] // n_heads))
    mask = None
    if causal:
        lq, lk = q.shape[-2], kv.shape[-2]
        mask = np.triu(np.ones((lq, lk), dtype=bool), k=1)
    return ad.row_softmax(scores, mask)


def mha_forward(sub: SubLayer, q: Tensor, kv: Tensor, causal: bool = False, *, n_heads: int,
                temperature: bool = True, train: bool = False, rng=None) -> Tensor:
    if sub.kind is SubLayerKind.FEED_FORWARD:
        raise ValueError("mha_forward on a feed-forward sub-layer")
    if causal and sub.kind is SubLayerKind.ENCODER_ATTENTION:
        raise ValueError("encoder attention cannot be causal")
    attn = attention_weights(sub, q, kv, n_heads, causal, temperature)
    attn = ad.dropout(attn, sub.dropout, train, rng)
    vh = _split_heads(ad.matmul(kv, sub["wv1"]), n_heads)
    ctx = ad.swapaxes(ad.matmul(attn, vh), -2, -3)
    *lead, length, h, dh = ctx.shape
    ctx = ad.reshape(ctx, (*lead, length, h * dh))
    return ad.matmul(ctx, sub["wv2"])


def branch_forward(sub: SubLayer, x: Tensor, enc_out: Tensor | None = None, causal: bool = False, *,
                   n_heads: int, temperature: bool = True, train: bool = False, rng=None) -> Tensor:
    """The residual-branch module ``f_i`` applied to ``x``."""
    if sub.kind is SubLayerKind.FEED_FORWARD:
        return ffn_forward(sub, x, train, rng)
    kw = dict(n_heads=n_heads, temperature=temperature, train=train, rng=rng)
    if sub.kind is SubLayerKind.ENCODER_ATTENTION:
        if enc_out is None:
            raise ValueError("encoder attention needs enc_out")
        return mha_forward(sub, x, enc_out, False, **kw)
    return mha_forward(sub, x, x, causal, **kw)


def sublayer_forward(variant: Wiring | ArchVariant, sub: SubLayer, x_prev: Tensor,
                     enc_out: Tensor | None = None, train: bool = False, *, n_heads: int,
                     temperature: bool = True, causal: bool = False,
                     rng=None) -> tuple[Tensor, TraceEntry]:
    """One residual block. Returns the block output and its trace entry.

    ``variant`` is a wiring or an architecture variant (the latter must not be
    the hybrid, whose wiring depends on the side). ``causal`` masks
    self-attention to earlier positions (decoder side).
    """
    wiring = _wiring_of(variant)
    kw = dict(n_heads=n_heads, temperature=temperature, train=train, rng=rng)
    if wiring is Wiring.PRE:
        a = branch_forward(sub, ad.layer_norm(x_prev, sub.ln_gamma, sub.ln_nu), enc_out, causal, **kw)
        a = ad.dropout(a, sub.dropout, train, rng)
        x = ad.add(x_prev, a)
        return x, TraceEntry(0, sub.kind, x, a, None)
    a = branch_forward(sub, x_prev, enc_out, causal, **kw)
    a = ad.dropout(a, sub.dropout, train, rng)
    shortcut = ad.scale_elementwise(x_prev, sub.omega) if wiring is Wiring.ADMIN else x_prev
    b = ad.add(shortcut, a)
    x = ad.layer_norm(b, sub.ln_gamma, sub.ln_nu)
    return x, TraceEntry(0, sub.kind, x, a, b)


def _wiring_of(variant) -> Wiring:
    if isinstance(variant, Wiring):
        return variant
    v = ArchVariant.parse(variant)
    if v is ArchVariant.HYBRID:
        raise ValueError("the hybrid variant has per-side wirings; pass a Wiring")
    return stack_wirings(v)[0]


# -- stacks -------------------------------------------------------------------

def embed(model: Model, weight: Tensor, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    e = ad.embedding(weight, tokens)
    e = ad.mul(e, math.sqrt(model.config.d_model))
    return ad.add(e, model.positions(tokens.shape[-1]))


def run_stack(model: Model, subs: list[SubLayer], x0: Tensor, enc_out: Tensor | None,
              side: str, final_ln, train: bool = False, rng=None) -> tuple[Tensor, ActivationTrace]:
    cfg = model.config
    wiring = subs[0].wiring if subs else Wiring.POST
    trace = ActivationTrace(side, wiring, [TraceEntry(0, None, x0)])
    x = x0
    for i, sub in enumerate(subs, start=1):
        x, entry = sublayer_forward(sub.wiring, sub, x, enc_out if side == "decoder" else None,
                                    train, n_heads=cfg.n_heads, temperature=cfg.temperature,
                                    causal=(side == "decoder"), rng=rng)
        entry.index = i
        trace.entries.append(entry)
    if final_ln is not None:
        x = ad.layer_norm(x, final_ln[0], final_ln[1])
    trace.output = x
    return x, trace


def encoder_forward(model: Model, src, train: bool = False, rng=None) -> tuple[Tensor, ActivationTrace]:
    x0 = embed(model, model.params["src_emb"], src)
    return run_stack(model, model.encoder, x0, None, "encoder", model.enc_final_ln, train, rng)


def decoder_forward(model: Model, tgt_in, enc_out: Tensor, train: bool = False,
                    rng=None) -> tuple[Tensor, ActivationTrace]:
    x0 = embed(model, model.params["tgt_emb"], tgt_in)
    x, trace = run_stack(model, model.decoder, x0, enc_out, "decoder", model.dec_final_ln, train, rng)
    return ad.matmul(x, model.params["out_proj"]), trace


def model_forward(model: Model, src, tgt_in, tgt_out, train: bool = False,
                  rng=None) -> tuple[Tensor, tuple[ActivationTrace, ActivationTrace]]:
    """Teacher-forced cross-entropy of ``tgt_out`` given ``src`` and ``tgt_in``."""
    src = np.atleast_2d(np.asarray(src, dtype=np.int64))
    tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
    for name, arr in (("source", src), ("target", tgt_in)):
        if arr.shape[-1] > model.config.max_len:
            raise ValueError(f"{name} length {arr.shape[-1]} exceeds max_len={model.config.max_len}")
    enc_out, enc_trace = encoder_forward(model, src, train, rng)
    logits, dec_trace = decoder_forward(model, tgt_in, enc_out, train, rng)
    loss = ad.cross_entropy(logits, np.asarray(tgt_out).reshape(-1))
    return loss, (enc_trace, dec_trace)


def encoder_only_forward(model: Model, x0: Tensor) -> tuple[Tensor, ActivationTrace]:
    """Run the encoder stack on a given input (no embedding); used by shift/beta studies."""
    return run_stack(model, model.encoder, x0, None, "encoder", model.enc_final_ln)


# -- checkpoints --------------------------------------------------------------

def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``meta`` and named float64 arrays in insertion order.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header
    (sorted keys; holds ``meta`` and each array's name and shape), then each
    array's little-endian float64 bytes in header order.
    """
    header = {"meta": meta,
              "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    off = 20 + hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(spec["shape"]).copy()
        off += 8 * n
    return header["meta"], arrays


def save_model(model: Model, path, extra_meta: dict | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    meta = {"config": model.config.to_dict(), "frozen": sorted(model.frozen)}
    if extra_meta:
        meta.update(extra_meta)
    arrays = model.state_dict()
    for k, v in (extra_arrays or {}).items():
        arrays["extra/" + k] = v
    save_container(path, meta, arrays)


def load_model(path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Returns the model, the remaining metadata and any extra arrays."""
    meta, arrays = load_container(path)
    model = Model(ModelConfig.from_dict(meta.pop("config")))
    model.frozen = set(meta.pop("frozen", model.frozen))
    extra = {k[6:]: arrays.pop(k) for k in list(arrays) if k.startswith("extra/")}
    model.load_state_dict(arrays)
    return model, meta, extra
