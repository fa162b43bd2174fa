"""Command-line runner: ``tlab <command> [--config FILE] [--seed N] [--out DIR] [--jobs N] [--variant V]``.

Configuration is an INI file with sections ``model``, ``optim``, ``task``,
``train``, ``diagnostics`` and ``output``. Values are layered as built-in
defaults, then the command's preset, then the file, then command-line flags.
Every run writes ``resolved.ini`` and ``SCHEMA_VERSION`` into its output
directory. Exit status: 0 success, 1 a check failed, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import acceptance, diagnostics as dg, gradcheck, oracle
from . import autodiff as ad
from .blocks import ArchVariant, ModelConfig, SubLayerKind, decoder_forward, encoder_forward, load_model
from .init import (InitScheme, admin_initialize, admin_profile, build_model, omega_from_profile,
                   reparameterize)
from .trainer import OptimConfig, SyntheticTask, load_checkpoint, save_checkpoint, train

SCHEMA_VERSION = "1"
OUT_ENV = "TLAB_OUT"


class ConfigError(Exception):
    """Bad flags or configuration; exit status 2."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str) -> list:
        return [conv(p.strip()) for p in s.split(",") if p.strip()]
    return parse


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


SCHEMA: dict[str, dict[str, object]] = {
    "model": {"variant": str, "n_enc": int, "n_dec": int, "d_model": int, "n_heads": int, "d_ff": int,
              "src_vocab": int, "tgt_vocab": int, "max_len": int, "dropout": float,
              "temperature": _bool, "seed": int},
    "optim": {"kind": str, "lr_max": float, "beta1": float, "beta2": float, "eps_adam": float,
              "warmup_steps": int, "weight_decay": float},
    "task": {"kind": str, "vocab": int, "min_len": int, "max_len": int, "seed": int, "batch_size": int},
    "train": {"steps": int, "checkpoint_every": int, "resume": str},
    "diagnostics": {"variants": _list(str), "seeds": int, "n_list": _list(int), "epsilon": float,
                    "perturb": _list(str), "branch_var": _opt_float, "batch_size": int, "seq_len": int,
                    "checkpoints": _list(str), "ops": _list(str), "include_model": _bool,
                    "mc_samples": int, "ph_samples": int, "ffn_tol": float, "attention_tol": float,
                    "ratio_min": float, "ratio_d_model": int, "reparameterize": _bool, "reparam_batches": int},
    "output": {"dir": str},
}

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {**{k: str(v) for k, v in ModelConfig(src_vocab=12, tgt_vocab=12, d_ff=64).to_dict().items()}},
    "optim": {**{k: str(v) for k, v in OptimConfig(warmup_steps=400).to_dict().items()}},
    "task": {**{k: str(v) for k, v in SyntheticTask().to_dict().items()}},
    "train": {"steps": "2000", "checkpoint_every": "500", "resume": ""},
    "diagnostics": {"variants": "postln,preln,admin", "seeds": "10", "n_list": "4,8,16,32,64",
                    "epsilon": "0.1", "perturb": "random", "branch_var": "none", "batch_size": "16",
                    "seq_len": "16", "checkpoints": "", "ops": "all", "include_model": "true",
                    "mc_samples": "131072", "ph_samples": "10000", "ffn_tol": "0.05",
                    "attention_tol": "0.10", "ratio_min": "0.95", "ratio_d_model": "64", "reparameterize": "true",
                    "reparam_batches": "5"},
    "output": {"dir": ""},
}

_WIDE = {"d_model": "128", "n_heads": "4", "d_ff": "512"}
PRESETS: dict[str, dict[str, dict[str, str]]] = {
    "gradcheck": {},
    "init-scan": {"model": {**_WIDE, "n_enc": "9", "n_dec": "6"},
                  "diagnostics": {"variants": "postln,preln,hybrid", "batch_size": "32"}},
    "beta": {"model": {**_WIDE, "n_enc": "6", "n_dec": "1"}, "diagnostics": {"branch_var": "8"}},
    "shift": {"model": _WIDE, "diagnostics": {"batch_size": "8", "seq_len": "10"}},
    "admin": {"model": {"variant": "admin", "n_enc": "6", "n_dec": "6"}},
    "train": {},
    "oracle": {"model": {"d_model": "32", "n_heads": "4", "d_ff": "128"}},
    "reproduce-all": {},
}


@dataclass
class Settings:
    command: str
    values: dict[str, dict[str, object]]
    raw: dict[str, dict[str, str]]
    out: Path
    jobs: int
    explicit: frozenset = frozenset()

    def model(self, **over) -> ModelConfig:
        return ModelConfig.from_dict({**self.values["model"], **over})

    def optim(self) -> OptimConfig:
        return OptimConfig(**self.values["optim"])

    def task(self) -> SyntheticTask:
        return SyntheticTask(**self.values["task"])

    @property
    def diag(self) -> dict[str, object]:
        return self.values["diagnostics"]

    def seeds(self) -> list[int]:
        base = int(self.values["model"]["seed"])
        return [base + k for k in range(int(self.diag["seeds"]))]

    def batch(self, seed: int | None = None):
        d = self.diag
        t = SyntheticTask(vocab=min(self.values["model"]["src_vocab"], self.values["model"]["tgt_vocab"]),
                          min_len=d["seq_len"], max_len=d["seq_len"], batch_size=d["batch_size"],
                          seed=self.values["task"]["seed"] if seed is None else seed)
        return t.batch(1)

    def scheme(self) -> InitScheme | None:
        bv = self.diag["branch_var"]
        return None if bv is None else InitScheme(branch_var=bv)

    def variants(self) -> list[ArchVariant]:
        return [ArchVariant.parse(v) for v in self.diag["variants"]]


def _layer(raw, section: str, items: dict[str, str], origin: str, explicit: set | None = None) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    for k, v in items.items():
        if k not in SCHEMA[section]:
            raise ConfigError(f"{origin}: unknown key {k!r} in [{section}]")
        raw[section][k] = str(v)
        if explicit is not None:
            explicit.add((section, k))


def resolve(command: str, args: argparse.Namespace) -> Settings:
    raw = {s: dict(v) for s, v in DEFAULTS.items()}
    explicit: set = set()
    for section, items in PRESETS.get(command, {}).items():
        _layer(raw, section, items, "preset")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            _layer(raw, section, dict(cp.items(section)), str(path), explicit)
    if args.seed is not None:
        raw["model"]["seed"] = raw["task"]["seed"] = str(args.seed)
    if args.variant is not None:
        if command in ("init-scan", "beta", "shift"):
            raw["diagnostics"]["variants"] = args.variant
        else:
            raw["model"]["variant"] = args.variant
            explicit.add(("model", "variant"))
    if getattr(args, "resume", None):
        raw["train"]["resume"] = args.resume
    if getattr(args, "steps", None) is not None:
        raw["train"]["steps"] = str(args.steps)
    values: dict[str, dict[str, object]] = {}
    for section, items in raw.items():
        values[section] = {}
        for k, v in items.items():
            try:
                values[section][k] = SCHEMA[section][k](v)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {k} = {v!r}: {exc}") from None
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    root = args.out or (os.path.join(os.environ[OUT_ENV], command) if os.environ.get(OUT_ENV) else None) \
        or (os.path.join(values["output"]["dir"], command) if values["output"]["dir"] else None) \
        or os.path.join("tlab_runs", command)
    s = Settings(command, values, raw, Path(root), args.jobs, frozenset(explicit))
    try:  # surface invalid combinations as configuration errors
        s.model()
        s.optim()
        s.task()
        s.variants()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return s


def write_resolved(s: Settings) -> None:
    s.out.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser(interpolation=None)
    for section in SCHEMA:
        cp[section] = {k: s.raw[section][k] for k in SCHEMA[section]}
    with open(s.out / "resolved.ini", "w") as fh:
        cp.write(fh)
    (s.out / "SCHEMA_VERSION").write_text(SCHEMA_VERSION + "\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- commands ----------------------------------------------------------------------

def cmd_gradcheck(s: Settings) -> int:
    ops = s.diag["ops"]
    if ops == ["all"]:
        ops = list(gradcheck.OPS)
    if not ops:
        raise ConfigError("gradcheck: the ops list is empty")
    unknown = [o for o in ops if o not in gradcheck.OPS]
    if unknown:
        raise ConfigError(f"gradcheck: unknown ops {unknown}")
    results = gradcheck.run_suite(ops, s.seeds(), s.diag["include_model"])
    dg.write_csv(s.out / "gradcheck.csv", ["name", "seed", "input", "rel_error", "tol", "ok"],
                 [(r.name, r.seed, r.input, r.rel_error, r.tol, int(r.ok)) for r in results])
    bad = [r for r in results if not r.ok]
    for r in bad:
        _say(f"FAIL {r.name} seed={r.seed} {r.input}: rel_error={r.rel_error:.3e} tol={r.tol:g}")
    _say(f"gradcheck: {len(results) - len(bad)}/{len(results)} checks passed")
    return 1 if bad else 0


def cmd_init_scan(s: Settings) -> int:
    seeds = s.seeds()
    rows = []
    for v in s.variants():
        cfg = s.model(variant=v.value, dropout=0.0)
        vdir = s.out / v.value
        vdir.mkdir(parents=True, exist_ok=True)
        batch = s.batch(seeds[0])
        dg.write_grad_hist(vdir / "grad_hist.csv", dg.grad_histogram(build_model(cfg, s.scheme(), batch), batch))
        study = dg.ratio_study(cfg, s.batch, seeds, s.scheme(), 1.0 - s.diag["ratio_min"])
        for side in ("encoder", "decoder"):
            summ = study[f"ratio/{side}"]
            for i in range(summ.median.size):
                rows.append((v.value, side, i + 1, float(summ.median[i]), float(summ.q25[i]), float(summ.q75[i])))
        _say(f"{v.value}: encoder min ratio {study['ratio/encoder'].median.min():.3f}, "
             f"decoder min ratio {study['ratio/decoder'].median.min():.3f}, "
             f"decoder variance decay {float(study['decay/decoder'].median):.1f}x")
    dg.write_csv(s.out / "vanishing.csv", ["variant", "side", "sublayer", "median_ratio", "q25", "q75"], rows)
    return 0


def cmd_beta(s: Settings) -> int:
    ckpts = [Path(p) for p in s.diag["checkpoints"]]
    missing = [str(p) for p in ckpts if not p.is_file()]
    if missing:
        raise ConfigError(f"checkpoint not found: {', '.join(missing)}")
    batch = s.batch()
    for v in s.variants():
        vdir = s.out / v.value
        vdir.mkdir(parents=True, exist_ok=True)
        med = dg.median_beta(dg.beta_study(s.model(variant=v.value, dropout=0.0), batch, s.seeds(), s.scheme()))
        dg.write_beta(vdir / "beta.csv", med)
        i = np.arange(1, med.diag_sq.size + 1)
        _say(f"{v.value}: max |i * beta_ii^2 - 1| = {np.abs(med.diag_sq * i - 1).max():.3f}, "
             f"max |raw row sum - 1| = {np.abs(med.raw_row_sums[1:] - 1).max():.3f}")
    for p in ckpts:
        model, _, _ = load_model(p)
        b = SyntheticTask(vocab=min(model.config.src_vocab, model.config.tgt_vocab),
                          min_len=s.diag["seq_len"], max_len=s.diag["seq_len"],
                          batch_size=s.diag["batch_size"], seed=s.values["task"]["seed"]).batch(1)
        dg.write_beta(s.out / f"beta_{p.stem}.csv", dg.estimate_beta(model, b))
    return 0


def _shift_cell(args):
    template, n, seed, kind, epsilon, batch, scheme = args
    model = dg.shift_model(template, n, seed, batch, scheme)
    return dg.output_shift_single(model, dg.PerturbSpec(kind=kind, epsilon=epsilon), batch)


def run_jobs(fn, keyed_args: dict, jobs: int) -> dict:
    """Evaluate ``fn`` on every argument tuple; results are keyed, so order never matters."""
    keys = sorted(keyed_args)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(fn, [keyed_args[k] for k in keys]))
    else:
        values = [fn(keyed_args[k]) for k in keys]
    return dict(zip(keys, values))


def cmd_shift(s: Settings) -> int:
    ns = sorted(s.diag["n_list"])
    if len(ns) < 3:
        raise ConfigError("shift: n_list needs at least three depths")
    if any(n % 2 for n in ns):
        raise ConfigError("shift: every N must be even (encoder layers have two sub-layers)")
    kinds = [dg.PerturbKind(k) for k in s.diag["perturb"]]
    batch = s.batch()
    cells = {}
    for v in s.variants():
        tmpl = s.model(variant=v.value, dropout=0.0)
        for kind in kinds:
            for n in ns:
                for seed in s.seeds():
                    cells[(v.value, kind.value, n, seed)] = (tmpl, n, seed, kind, s.diag["epsilon"], batch, s.scheme())
    shifts = run_jobs(_shift_cell, cells, s.jobs)
    curves = []
    for v in s.variants():
        for kind in kinds:
            per_seed = {n: [shifts[(v.value, kind.value, n, sd)] for sd in s.seeds()] for n in ns}
            means = [float(np.mean(per_seed[n])) for n in ns]
            transform = "identity" if v is ArchVariant.POSTLN else "log"
            if all(m == 0.0 for m in means):
                slope, intercept, r2 = 0.0, 0.0, 0.0
            else:
                slope, intercept, r2 = dg.fit_r2(list(zip(ns, means)), transform)
            label = v.value if kind is dg.PerturbKind.RANDOM_NOISE else f"{v.value}/{kind.value}"
            curves.append(dg.ShiftCurve(label, ns, means, per_seed, transform, slope, intercept, r2))
            _say(f"{label}: R^2 vs {'N' if transform == 'identity' else 'log N'} = {r2:.4f}")
    dg.write_shift(s.out / "shift.csv", curves)
    dg.write_fit(s.out / "fit.csv", curves)
    return 0


def cmd_admin(s: Settings) -> int:
    cfg = s.model()
    if cfg.variant is not ArchVariant.ADMIN:
        raise ConfigError("admin: the model variant must be admin")
    task = s.task()
    batch = task.batch(0)
    model = build_model(cfg, s.scheme(), batch)
    profile = admin_profile(model, batch)
    profile.save(s.out / "profile.csv")
    admin_initialize(model, profile)
    rows = []
    for side, subs, vf in (("encoder", model.encoder, profile.encoder_var_f),
                           ("decoder", model.decoder, profile.decoder_var_f)):
        cum = np.concatenate([[0.0], np.cumsum(vf)[:-1]])
        for i, (sub, w, c) in enumerate(zip(subs, omega_from_profile(vf), cum), start=1):
            rows.append((side, i, float(sub.omega.data[0]), float(w), float(c)))
    dg.write_csv(s.out / "omega.csv", ["side", "index", "omega", "expected", "cum_var_f"], rows)
    save_checkpoint(s.out / "admin_init.bin", model, None, 0)
    if not s.diag["reparameterize"]:
        return 0
    post = reparameterize(model)
    save_checkpoint(s.out / "postln_reparam.bin", post, None, 0)
    checks = []
    for k in range(s.diag["reparam_batches"]):
        b = SyntheticTask(**{**task.to_dict(), "seed": task.seed + 1000 + k}).batch(k)
        with ad.no_tape():
            ea, _ = encoder_forward(model, b.src)
            eb, _ = encoder_forward(post, b.src)
            oa, _ = decoder_forward(model, b.tgt_in, ea)
            ob, _ = decoder_forward(post, b.tgt_in, eb)
        checks.append((k, ad.rel_error(oa, ob)))
    dg.write_csv(s.out / "reparam_check.csv", ["batch", "rel_error"], checks)
    worst = max(e for _, e in checks)
    _say(f"reparameterized model: worst output rel_error {worst:.2e}")
    return 0 if worst < 1e-9 else 1


def cmd_train(s: Settings) -> int:
    t = s.values["train"]
    task, optim = s.task(), s.optim()
    resume = t["resume"]
    if resume:
        if not Path(resume).is_file():
            raise ConfigError(f"checkpoint not found: {resume}")
        model, state, start = load_checkpoint(resume)
        if ("model", "variant") in s.explicit and \
                ArchVariant.parse(s.values["model"]["variant"]) is not model.variant:
            raise ConfigError("train: --variant conflicts with the variant stored in the resume checkpoint")
    else:
        cfg = s.model()
        model = build_model(cfg, s.scheme(), task.batch(0))
        if cfg.variant is ArchVariant.ADMIN:
            admin_initialize(model, admin_profile(model, task.batch(0)))
        state, start = None, 0
    if start >= t["steps"]:
        raise ConfigError(f"train: checkpoint is already at step {start} >= steps={t['steps']}")
    tracker = dg.BalanceTracker(dg.attention_matrix_names(model))
    if start:
        tracker.on_epoch(0, model)
    every = t["checkpoint_every"] or None
    record = train(model, task, optim, t["steps"], every, s.out, state=state, start_step=start,
                   dropout_seed=s.values["model"]["seed"], on_epoch=tracker.on_epoch, on_step=tracker.on_step)
    if len(tracker.snapshots) >= 2:
        dg.write_param_norms(s.out / "param_norms.csv", tracker.series())
    last = record.steps[-1].loss if record.steps else math.nan
    status = f"diverged at step {record.diverged_at}" if record.diverged else "completed"
    _say(f"train: {status}; final loss {last:.4f}")
    return 0


def cmd_oracle(s: Settings) -> int:
    d = s.diag
    m = s.values["model"]
    D, H, Df = m["d_model"], m["n_heads"], m["d_ff"]
    L, seed = d["seq_len"], m["seed"]
    var_ff = 2.0 / (D + Df)
    var_att = 1.0 / D
    est = [oracle.mc_ffn_variance(D, Df, var_ff, var_ff, d["mc_samples"], seed),
           oracle.mc_attention_variance(D, H, L, var_att, var_att, var_att, var_att,
                                        samples=d["mc_samples"], seed=seed, ph_samples=d["ph_samples"]),
           oracle.mc_attention_variance(D, H, L, var_att, var_att, var_att, var_att,
                                        samples=d["mc_samples"], seed=seed, uniform=True)]
    tols = {"ffn_sigma2": d["ffn_tol"], "attention_sigma2": d["attention_tol"],
            "attention_sigma2_uniform": d["attention_tol"]}
    failed = [e.name for e in est if e.rel_error >= tols[e.name]]
    for kind in SubLayerKind:
        r = oracle.backprop_ratio_check(kind, d["ratio_d_model"], None, None, seed=seed, length=L)
        est.append(oracle.VarianceEstimate(f"backprop_ratio_{kind.value}", 1.0, r, 32, seed))
        below = kind is SubLayerKind.ENCODER_ATTENTION
        if (below and r >= 1.0) or (not below and r < d["ratio_min"]):
            failed.append(f"backprop_ratio_{kind.value}")
    oracle.write_report(s.out / "oracle_report.csv", est)
    for e in est:
        _say(f"{e.name}: closed form {e.closed_form:.5f}, Monte-Carlo {e.monte_carlo:.5f}, "
             f"rel error {e.rel_error:.4f}")
    if failed:
        _say("FAIL: " + ", ".join(failed))
        return 1
    return 0


def cmd_reproduce_all(s: Settings) -> int:
    results = []
    with open(s.out / "acceptance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["criterion", "passed", "key", "value"])
        for n, _, _ in acceptance.CRITERIA:
            c = acceptance.run_criterion(n, s.jobs)
            results.append(c)
            _say(c.line())
            for k, v in c.detail.items():
                w.writerow([n, int(c.passed), k, v])
            fh.flush()
    deep = acceptance.deep_stack_report()
    dg.write_csv(s.out / "deep_stack.csv", ["variant", "final_loss", "diverged", "diverged_at", "steps"],
                 [(v, r["final_loss"], int(r["diverged"]), r["diverged_at"], r["steps"]) for v, r in deep.items()])
    for v, r in deep.items():
        _say(f"deep stack {v}: final loss {r['final_loss']:.4f}, diverged={r['diverged']}")
    failed = [c.number for c in results if not c.passed]
    _say(f"acceptance: {len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


COMMANDS = {
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "init-scan": (cmd_init_scan, "gradient norm histograms and vanishing ratios at initialization"),
    "beta": (cmd_beta, "layer dependency matrices at init and for given checkpoints"),
    "shift": (cmd_shift, "output shift versus depth with least-squares fits"),
    "admin": (cmd_admin, "Admin profiling, initialization and reparameterization"),
    "train": (cmd_train, "train on a synthetic task with checkpoints and norm tracking"),
    "oracle": (cmd_oracle, "closed-form variances against Monte-Carlo"),
    "reproduce-all": (cmd_reproduce_all, "run every acceptance check"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tlab", description="Transformer stability lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int, help="base seed for models and tasks")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--variant", help="postln, preln, admin or hybrid")
        if name == "train":
            sp.add_argument("--resume", help="continue from this checkpoint")
            sp.add_argument("--steps", type=int, help="total number of steps")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    fn = COMMANDS[args.command][0]
    try:
        s = resolve(args.command, args)
        write_resolved(s)
        return fn(s)
    except ConfigError as exc:
        print(f"tlab {args.command}: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
