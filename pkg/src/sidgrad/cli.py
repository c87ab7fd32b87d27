"""Command-line entry point: ``sidgrad {run,bilevel,bounds,convert}``.

Experiments are driven by an INI file; ``--set section.key=value`` flags
override single keys.  Exit status is 0 on success, 1 on a runtime failure
and 2 on a configuration or usage error.  The output directory is, in
order of precedence, ``--out``, ``[output] dir``, ``$SID_OUT_DIR`` and
``./sid_out``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import bounds, harness
from .core import ProblemConstants, estimate_contraction, estimate_variance_constants
from .data import DataFormatError, Dataset, binarize_odd_even, load_dataset, split_train_val, write_csv, write_idx

ENV_OUT = "SID_OUT_DIR"
DEFAULT_OUT = "sid_out"


class ConfigError(ValueError):
    pass


def _floats(s):
    return [float(x) for x in s.replace(",", " ").split()]


def _ints(s):
    return [int(x) for x in s.replace(",", " ").split()]


def _names(s):
    return [x for x in s.replace(",", " ").split()]


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CONST_KEYS = {name: float for name in (
    "q", "L_E", "nu1", "nu2", "mu1", "mu2", "L_Phi", "L_PhiTilde", "m2",
    "sigma1_lower", "sigma2_lower", "sigma_lam1", "sigma_lam2")}
_CONST_KEYS["estimated"] = _names

SCHEMA = {
    "problem": {
        "kind": str, "lam": str, "a_diag": _floats, "w_target": _floats, "noise": str,
        "noise_std": float, "q": float, "shift": _floats, "data_format": str, "data_path": str,
        "labels_path": str, "n_train": int, "n_val": int, "n_features": int, "batch_size": int,
        "reg_mode": str, "sampling": str, "split_seed": int, "binarize": str,
    },
    "variant": {"names": _names, "jvp_samples": int},
    "budget": {"epochs": float, "checkpoints": int},
    "seeds": {"base": int, "count": int, "list": _ints},
    "output": {"dir": str},
    "outer": {
        "steps": int, "lr": float, "warm_start": _bool, "domain": str, "lam_min": float,
        "lower": _floats, "upper": _floats, "estimator": str, "log_space": _bool,
        "variant": str, "epochs": float,
    },
    "bounds": {
        "t": _ints, "k": _ints, "beta": float, "gamma": float, "source": str, "rate": str,
        "eta": float, "w_norm": float, "grad_norm": float,
    },
    "constants": _CONST_KEYS,
}


class Config:
    """Typed view of a validated INI configuration."""

    def __init__(self, parser: configparser.ConfigParser, base_dir: Path):
        self.base_dir = base_dir
        self.values = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            out = {}
            for key, raw in parser.items(section):
                conv = SCHEMA[section].get(key)
                if conv is None:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    out[key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
            self.values[section] = out

    def has(self, section):
        return section in self.values

    def get(self, section, key, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section, key):
        val = self.get(section, key)
        if val is None:
            raise ConfigError(f"missing key {key!r} in [{section}]")
        return val

    def path(self, section, key):
        p = Path(self.require(section, key))
        p = p if p.is_absolute() else self.base_dir / p
        if not p.exists():
            raise ConfigError(f"[{section}] {key}: no such file {p}")
        return p


def load_config(path, overrides=()) -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        base = path.parent
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    return Config(parser, base)


# ---------------------------------------------------------------------------
# problem construction


def _binary_labels(y, mode):
    y = np.asarray(y)
    if mode == "odd_even":
        return binarize_odd_even(y)
    if mode == "none":
        return y.astype(np.float64)
    if mode != "auto":
        raise ConfigError(f"binarize must be auto, odd_even or none, got {mode!r}")
    vals = set(np.unique(y).tolist())
    if vals <= {-1, 1}:
        return y.astype(np.float64)
    if vals <= {0, 1}:
        return 2.0 * y - 1.0
    return binarize_odd_even(y)


def _load_data(cfg: Config) -> tuple[Dataset, Dataset]:
    fmt = cfg.require("problem", "data_format")
    if fmt == "synthetic":
        n = cfg.get("problem", "n_train", 64)
        d = cfg.require("problem", "n_features")
        seed = cfg.get("problem", "split_seed", 0)
        from .core import SampleKey
        gen = SampleKey(seed, 7, 0).generator()
        X = gen.standard_normal((2 * n, d))
        w_true = gen.standard_normal(d)
        y = np.where(X @ w_true + 0.5 * gen.standard_normal(2 * n) > 0, 1, -1)
        ds = Dataset(X, y)
        return ds.subset(np.arange(n)), ds.subset(np.arange(n, 2 * n))
    if fmt not in ("idx", "libsvm", "csv"):
        raise ConfigError(f"unknown data_format {fmt!r}")
    path = cfg.path("problem", "data_path")
    labels = cfg.path("problem", "labels_path") if fmt == "idx" else None
    ds = load_dataset(fmt, path, labels)
    n_tr = cfg.get("problem", "n_train", ds.n // 2)
    n_val = cfg.get("problem", "n_val", ds.n - n_tr)
    return split_train_val(ds, n_tr, n_val, cfg.get("problem", "split_seed", 0))


def _lam_value(cfg, m, default=None):
    raw = cfg.get("problem", "lam")
    if raw is None:
        if default is None:
            raise ConfigError("missing key 'lam' in [problem]")
        return np.asarray(default, dtype=np.float64)
    if raw.strip().startswith("exp_uniform"):
        from .outer import exp_uniform_init
        parts = raw.split(":")
        return exp_uniform_init(m, int(parts[1]) if len(parts) > 1 else 0)
    try:
        vals = _floats(raw)
    except ValueError:
        raise ConfigError(f"[problem] lam: cannot parse {raw!r}") from None
    if len(vals) == 1 and m > 1:
        vals = vals * m
    if len(vals) != m:
        raise ConfigError(f"[problem] lam: expected {m} values, got {len(vals)}")
    return np.asarray(vals)


def build_problem(cfg: Config):
    """``(problem, lam)`` from the ``[problem]`` section."""
    from .problems import MultinomialLogistic, RegLogistic, ToyContraction, quadratic_bilevel
    kind = cfg.require("problem", "kind")
    if kind == "quadratic":
        a = cfg.get("problem", "a_diag", [2.0, 4.0])
        prob = quadratic_bilevel(np.diag(a), None, cfg.get("problem", "w_target"),
                                 cfg.get("problem", "noise", "none"), cfg.get("problem", "noise_std", 0.0))
        return prob, _lam_value(cfg, prob.m)
    if kind == "toy":
        shift = cfg.get("problem", "shift", [0.05, 0.05])
        prob = ToyContraction(cfg.get("problem", "q", 0.9), shift, cfg.get("problem", "noise_std", 0.1))
        return prob, _lam_value(cfg, prob.m, prob.c)
    if kind in ("logistic", "multinomial"):
        tr, va = _load_data(cfg)
        reg = cfg.get("problem", "reg_mode", "single")
        b = cfg.get("problem", "batch_size", 50)
        sampling = cfg.get("problem", "sampling", "iid_with_replacement")
        seed = cfg.get("problem", "split_seed", 0)
        if kind == "logistic":
            mode = cfg.get("problem", "binarize", "auto")
            prob = RegLogistic(tr.X, _binary_labels(tr.y, mode), reg, b, va.X,
                               _binary_labels(va.y, mode), sampling, seed)
        else:
            c = int(max(tr.y.max(), va.y.max())) + 1
            prob = MultinomialLogistic(tr.X, tr.y, c, reg, b, va.X, va.y, sampling, seed)
        return prob, _lam_value(cfg, prob.m)
    raise ConfigError(f"unknown problem kind {kind!r}")


def _seeds(cfg, seed_flag):
    explicit = cfg.get("seeds", "list")
    if explicit is not None:
        return explicit if seed_flag is None else [seed_flag + s for s in explicit]
    base = cfg.get("seeds", "base", 0) if seed_flag is None else seed_flag
    return list(range(base, base + cfg.get("seeds", "count", 1)))


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("output", "dir") or os.environ.get(ENV_OUT) or DEFAULT_OUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(x):
    return harness._fmt(x)


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands


def _checked(fn, *a, **kw):
    """Call a constructor whose ``ValueError`` means the configuration is invalid."""
    try:
        return fn(*a, **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_run(args, cfg: Config) -> int:
    problem, lam = _checked(build_problem, cfg)
    names = cfg.require("variant", "names")
    for name in names:
        _checked(harness.get_variant, name)
    epochs = cfg.require("budget", "epochs")
    n_ckpt = cfg.get("budget", "checkpoints", 20)
    seeds = _seeds(cfg, args.seed)
    jvp = cfg.get("variant", "jvp_samples", 1)
    out = _out_dir(args, cfg)

    records = harness.run_many(problem, lam, names, epochs, seeds, n_ckpt, jvp, args.workers)
    harness.export_csv(records, out / "runs.csv")
    curves = {}
    for name in names:
        curves[name] = harness.aggregate_runs([r for r in records if r.variant == name])
        harness.export_csv([curves[name]], out / f"curve_{name}.csv")

    header = ["variant", "epoch", "t", "k", "mse_mean", "bound_total", "bound_floor", "indicative"]
    rows = []
    for name in names:
        spec = harness.get_variant(name)
        if spec.alg_ll != "SGD_dec" or spec.alg_ls != "SGD_dec":
            continue
        curve = curves[name]
        pairs = [harness.epoch_budget_to_iters(spec, e, problem.n_samples, problem.batch_size,
                                               problem.batch_size) for e in curve.epochs]
        try:
            over = harness.bound_overlay(problem, lam, pairs)
        except (ValueError, NotImplementedError) as exc:
            print(f"warning: no bound overlay for {name}: {exc}", file=sys.stderr)
            continue
        for e, m, b in zip(curve.epochs, curve.mean, over):
            rows.append({"variant": name, "epoch": e, "t": b["t"], "k": b["k"], "mse_mean": m,
                         "bound_total": b["total"], "bound_floor": b["floor"],
                         "indicative": b["indicative"]})
    _write_rows(out / "bounds_overlay.csv", header, rows)
    print(f"wrote {len(records)} runs and {len(names)} curves to {out}")
    return 0


def cmd_bilevel(args, cfg: Config) -> int:
    from .outer import HyperDomain, HypergradConfig, outer_sgd
    if not cfg.has("outer"):
        raise ConfigError("missing section [outer]")
    problem, lam = _checked(build_problem, cfg)
    kind = cfg.get("outer", "domain", "positive_orthant")
    if kind == "box":
        domain = _checked(HyperDomain.box, cfg.require("outer", "lower"), cfg.require("outer", "upper"))
    elif kind == "positive_orthant":
        domain = HyperDomain.positive_orthant(cfg.get("outer", "lam_min", 0.0))
    elif kind == "unconstrained":
        domain = HyperDomain.unconstrained()
    else:
        raise ConfigError(f"[outer] domain: unknown kind {kind!r}")
    hcfg = _checked(
        HypergradConfig,
        variant=cfg.get("outer", "variant", "StochDec"),
        epochs=cfg.get("outer", "epochs", cfg.get("budget", "epochs", 20.0)),
        estimator=cfg.get("outer", "estimator", "sid"),
        log_space=cfg.get("outer", "log_space", False),
        jvp_samples=cfg.get("variant", "jvp_samples", 1),
    )
    seed = _seeds(cfg, args.seed)[0]
    lam0 = domain.project(lam)
    trace = outer_sgd(problem, lam0, domain, cfg.require("outer", "steps"), cfg.require("outer", "lr"),
                      hcfg, cfg.get("outer", "warm_start", False), seed)
    out = _out_dir(args, cfg)
    m = problem.m
    header = (["step"] + [f"lam_{i}" for i in range(m)] + [f"grad_{i}" for i in range(m)]
              + ["f_val", "accuracy", "epochs"])
    rows = []
    for s in trace.steps:
        row = {"step": s.step, "f_val": s.f_val, "accuracy": s.accuracy, "epochs": s.epochs}
        row.update({f"lam_{i}": s.lam[i] for i in range(m)})
        row.update({f"grad_{i}": s.grad[i] for i in range(m)})
        rows.append(row)
    _write_rows(out / "outer_trace.csv", header, rows)
    if trace.status != "ok":
        print(f"error: {trace.status}", file=sys.stderr)
        return 1
    print(f"wrote {len(rows)} outer steps to {out / 'outer_trace.csv'}")
    return 0


def _constants_from_config(cfg: Config):
    vals = dict(cfg.values["constants"])
    est = frozenset(vals.pop("estimated", []))
    if "q" not in vals:
        raise ConfigError("missing key 'q' in [constants]")
    try:
        return ProblemConstants(**vals, estimated=est)
    except ValueError as exc:
        raise ConfigError(f"[constants] {exc}") from None


def cmd_bounds(args, cfg: Config) -> int:
    source = cfg.get("bounds", "source", "constants" if cfg.has("constants") else "problem")
    w_norm = cfg.get("bounds", "w_norm")
    if source == "constants":
        if not cfg.has("constants"):
            raise ConfigError("missing section [constants]")
        consts = _constants_from_config(cfg)
        if w_norm is None:
            raise ConfigError("missing key 'w_norm' in [bounds]")
    elif source in ("problem", "estimate"):
        problem, lam = _checked(build_problem, cfg)
        consts = problem.constants(lam)
        w_star = problem.fixed_point(lam)
        w_norm = float(np.linalg.norm(w_star)) if w_norm is None else w_norm
        if source == "estimate":
            q_hat = estimate_contraction(problem, lam)
            if q_hat >= 1.0:
                raise ConfigError(f"estimated contraction modulus {q_hat:.6g} >= 1")
            ve = estimate_variance_constants(problem, lam, w_star)
            consts = consts.replace(q=q_hat, sigma_lam1=ve.sigma1_hat, m2=ve.m2_hat,
                                    estimated=frozenset({"q", "sigma_lam1", "m2"}))
    else:
        raise ConfigError(f"[bounds] source must be constants, problem or estimate, got {source!r}")
    ts = cfg.get("bounds", "t", [10, 100, 1000, 10000])
    ks = cfg.get("bounds", "k", ts)
    if len(ks) != len(ts):
        raise ConfigError("[bounds] t and k must have the same length")
    q = consts.q
    g_norm = cfg.get("bounds", "grad_norm", consts.L_E)
    rate = cfg.get("bounds", "rate", "power_law")
    try:
        if rate == "power_law":
            beta = cfg.get("bounds", "beta", 2.0 / (1.0 - q * q))
            s2 = 2.0 * (consts.L_PhiTilde ** 2 + q * q) / (1.0 - q) ** 2
            gamma = cfg.get("bounds", "gamma", beta * (1.0 + s2))
            d_w, d_v, _, _ = bounds.subproblem_rate_constants(consts, beta, gamma, w_norm, g_norm)
            rho_f = bounds.RateFunction.power_law(d_w, gamma)
            sig_f = bounds.RateFunction.power_law(d_v, gamma)
        elif rate == "geometric":
            s2 = 2.0 * (consts.L_PhiTilde ** 2 + q * q) / (1.0 - q) ** 2
            eta = cfg.get("bounds", "eta", 1.0 / (1.0 + s2))
            r = 1.0 - eta * (1.0 - q * q)
            v_sq = g_norm ** 2 / (1.0 - q) ** 2
            rho_f = bounds.RateFunction.geometric(r, eta * consts.sigma_lam1 / (1 - q * q), w_norm ** 2)
            sig_f = bounds.RateFunction.geometric(
                r, eta * 2.0 * consts.L_PhiTilde ** 2 * v_sq / (1 - q * q), v_sq)
        else:
            raise ConfigError(f"[bounds] rate must be power_law or geometric, got {rate!r}")
    except ValueError as exc:
        raise ConfigError(f"[bounds] {exc}") from None
    rows = []
    for t, k in zip(ts, ks):
        rho, sig = rho_f(t), sig_f(k)
        b = bounds.mse_bound(consts, rho, sig)
        inner, outer = bounds.variance_bounds(consts, rho, sig)
        rows.append({"t": t, "k": k, "rho": rho, "sigma": sig,
                     "bias": bounds.bias_bound(consts, rho, sig), "var_inner": inner,
                     "var_outer": outer, "total": b.total, "floor": b.floor,
                     "indicative": int(b.indicative)})
    out = _out_dir(args, cfg)
    header = ["t", "k", "rho", "sigma", "bias", "var_inner", "var_outer", "total", "floor", "indicative"]
    _write_rows(out / "bounds.csv", header, rows)
    print(f"wrote {len(rows)} rows to {out / 'bounds.csv'}")
    return 0


def cmd_convert(args) -> int:
    try:
        ds = load_dataset(args.src_format, args.input, args.input_labels)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    if args.dst_format == "csv":
        write_csv(ds, args.output, header=not args.no_header)
    elif args.dst_format == "idx":
        if not args.output_labels:
            raise ConfigError("idx output needs --output-labels")
        scale = args.pixel_scale
        if scale is None:
            scale = 255.0 if ds.X.size and ds.X.max() <= 1.0 else 1.0
        ds = Dataset(ds.X, ds.y, scale, ds.image_shape, ds.meta)
        write_idx(ds, args.output, args.output_labels)
    else:
        raise ConfigError(f"unknown output format {args.dst_format!r}")
    print(f"converted {ds.n} rows to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sidgrad", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "hypergradient-error experiment"),
                           ("bilevel", "projected SGD on the hyperparameters"),
                           ("bounds", "table of MSE bound components")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", help=f"output directory (default: [output] dir, ${ENV_OUT}, ./{DEFAULT_OUT})")
        p.add_argument("--seed", type=int, help="base seed, overrides [seeds] base")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for replicates")
    p = sub.add_parser("convert", help="convert a dataset between idx, libsvm and csv")
    p.add_argument("--from", dest="src_format", required=True, choices=("idx", "libsvm", "csv"))
    p.add_argument("--to", dest="dst_format", required=True, choices=("csv", "idx"))
    p.add_argument("--input", required=True)
    p.add_argument("--input-labels", help="labels file for idx input")
    p.add_argument("--output", required=True)
    p.add_argument("--output-labels", help="labels file for idx output")
    p.add_argument("--pixel-scale", type=float, help="multiplier giving integer pixels for idx output")
    p.add_argument("--no-header", action="store_true", help="omit the csv header row")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            return cmd_convert(args)
        cfg = load_config(args.config, args.set)
        handler = {"run": cmd_run, "bilevel": cmd_bilevel, "bounds": cmd_bounds}[args.command]
        return handler(args, cfg)
    except (ConfigError, DataFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
