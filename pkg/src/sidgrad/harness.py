"""Hypergradient-error experiments: variants, epoch accounting, replicate
statistics, bias/variance decomposition and CSV export."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bounds
from .fixpoint import StepSchedule, schedule_constant, schedule_decreasing
from .sid import aid_batch, sid_estimate

__all__ = [
    "ALGORITHMS",
    "VARIANTS",
    "VariantSpec",
    "EstimatorConfig",
    "RunRecord",
    "Curve",
    "Moments",
    "get_variant",
    "epoch_budget_to_iters",
    "estimator_for_variant",
    "reference_gradient",
    "run_variant",
    "run_many",
    "aggregate_runs",
    "empirical_moments",
    "export_csv",
    "read_csv",
    "bound_overlay",
    "REFERENCE_ITERS",
]

ALGORITHMS = ("GD", "SGD_const", "SGD_dec")
REFERENCE_ITERS = 2000


@dataclass(frozen=True)
class VariantSpec:
    name: str
    epochs_ll_pct: int
    epochs_ls_pct: int
    alg_ll: str
    alg_ls: str

    def __post_init__(self):
        if self.epochs_ll_pct <= 0 or self.epochs_ls_pct <= 0:
            raise ValueError("epoch percentages must be positive")
        if self.epochs_ll_pct + self.epochs_ls_pct != 100:
            raise ValueError("epoch percentages must sum to 100")
        for alg in (self.alg_ll, self.alg_ls):
            if alg not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {alg!r}; expected one of {ALGORITHMS}")


VARIANTS = {v.name: v for v in (
    VariantSpec("Batch", 50, 50, "GD", "GD"),
    VariantSpec("StochConst", 50, 50, "SGD_const", "SGD_const"),
    VariantSpec("StochDec", 50, 50, "SGD_dec", "SGD_dec"),
    VariantSpec("StochBatch", 50, 50, "SGD_dec", "GD"),
    VariantSpec("BatchStoch", 50, 50, "GD", "SGD_dec"),
    VariantSpec("Batch75_25", 75, 25, "GD", "GD"),
    VariantSpec("StochConst75_25", 75, 25, "SGD_const", "SGD_const"),
    VariantSpec("StochDec75_25", 75, 25, "SGD_dec", "SGD_dec"),
)}


def get_variant(variant) -> VariantSpec:
    if isinstance(variant, VariantSpec):
        return variant
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def epoch_budget_to_iters(variant, total_epochs: float, n_tr: int, batch_ll: int,
                          batch_ls: int) -> tuple[int, int]:
    """Iterations ``(t, k)`` affordable within ``total_epochs`` passes over ``n_tr`` points.

    Deterministic (GD) subproblems use the full training set per iteration,
    whatever batch size is passed for them.
    """
    spec = get_variant(variant)
    if not total_epochs > 0:
        raise ValueError("total_epochs must be > 0")
    if n_tr <= 0:
        raise ValueError("n_tr must be positive")
    b_ll = n_tr if spec.alg_ll == "GD" else batch_ll
    b_ls = n_tr if spec.alg_ls == "GD" else batch_ls
    if b_ll <= 0 or b_ls <= 0:
        raise ValueError("batch sizes must be positive")
    t = _round_half_up(spec.epochs_ll_pct / 100.0 * total_epochs * n_tr / b_ll)
    k = _round_half_up(spec.epochs_ls_pct / 100.0 * total_epochs * n_tr / b_ls)
    return t, k


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything :func:`sid_estimate` needs besides the problem, ``lam`` and seeds."""

    t: int
    k: int
    lower_schedule: StepSchedule
    linear_schedule: StepSchedule
    lower_stochastic: bool = True
    linear_stochastic: bool = True
    final_stochastic: bool = True
    jvp_samples: int = 1
    tag: str = "sid"

    def with_iters(self, t: int, k: int) -> "EstimatorConfig":
        return EstimatorConfig(t, k, self.lower_schedule, self.linear_schedule, self.lower_stochastic,
                               self.linear_stochastic, self.final_stochastic, self.jvp_samples, self.tag)

    def run(self, problem, lam, master_seed=0, streams=(0, 1, 2), w0=None, n_replicates=None):
        return sid_estimate(problem, lam, self.t, self.k, self.lower_schedule, self.linear_schedule,
                            master_seed=master_seed, jvp_samples=self.jvp_samples, streams=streams,
                            w0=w0, n_replicates=n_replicates, lower_stochastic=self.lower_stochastic,
                            linear_stochastic=self.linear_stochastic,
                            final_stochastic=self.final_stochastic, variant_tag=self.tag)


def _schedule_for(alg, consts):
    if alg == "GD":
        return StepSchedule.constant(1.0)
    if alg == "SGD_const":
        return schedule_constant(consts.sigma2_lower)
    return schedule_decreasing(consts.q, consts.sigma2_lower)


def estimator_for_variant(problem, lam, variant, t: int, k: int, jvp_samples: int = 1,
                          consts=None) -> EstimatorConfig:
    """Schedules and sampler choices of a variant.

    GD subproblems use the mean map with unit steps; constant SGD uses
    ``1/(1+sigma2)``; decreasing SGD uses ``beta = 2/(1-q^2)`` and
    ``gamma = beta (1 + sigma2)``.  The final Jacobian product is exact
    only when both subproblems are deterministic.
    """
    spec = get_variant(variant)
    stoch_ll, stoch_ls = spec.alg_ll != "GD", spec.alg_ls != "GD"
    if consts is None and (stoch_ll or stoch_ls):
        consts = problem.constants(lam)
    return EstimatorConfig(
        t, k, _schedule_for(spec.alg_ll, consts), _schedule_for(spec.alg_ls, consts),
        lower_stochastic=stoch_ll, linear_stochastic=stoch_ls,
        final_stochastic=stoch_ll or stoch_ls, jvp_samples=jvp_samples, tag=spec.name,
    )


def reference_gradient(problem, lam) -> np.ndarray:
    """Closed-form hypergradient when available, else deterministic AID with ``t = k = 2000``.

    Cached per ``lam`` on the problem instance.
    """
    lam = problem.check_lam(lam)
    cache = problem.__dict__.setdefault("_reference_cache", {})
    key = lam.tobytes()
    if key not in cache:
        if problem.has_exact_hypergrad:
            g = problem.exact_hypergrad(lam)
        else:
            g = aid_batch(problem, lam, REFERENCE_ITERS, REFERENCE_ITERS).grad
        cache[key] = np.array(g, dtype=np.float64)
    return cache[key].copy()


@dataclass
class RunRecord:
    run_id: str
    variant: str
    seed: int
    checkpoints: list = field(default_factory=list)  # [(epoch, sq_error)]
    t: int = 0
    k: int = 0

    def __post_init__(self):
        epochs = [e for e, _ in self.checkpoints]
        if any(b < a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("checkpoint epochs must be nondecreasing")
        if any(err < 0 for _, err in self.checkpoints):
            raise ValueError("squared errors must be >= 0")

    @property
    def terminal_error(self) -> float:
        return self.checkpoints[-1][1]


def checkpoint_epochs(problem, variant, total_epochs: float, n_checkpoints: int = 20) -> list:
    """Log-spaced epoch budgets ending at ``total_epochs``.

    The first budget is the smallest one that affords an iteration of each
    subproblem; budgets giving the same ``(t, k)`` are merged.
    """
    spec = get_variant(variant)
    n, b = problem.n_samples, problem.batch_size
    cost = max((n if spec.alg_ll == "GD" else b) / n / (spec.epochs_ll_pct / 100.0),
               (n if spec.alg_ls == "GD" else b) / n / (spec.epochs_ls_pct / 100.0))
    if n_checkpoints <= 1 or cost >= total_epochs:
        return [float(total_epochs)]
    grid = np.geomspace(cost, total_epochs, n_checkpoints)
    grid[-1] = total_epochs
    out, seen = [], set()
    for e in grid:
        tk = epoch_budget_to_iters(spec, float(e), n, b, b)
        if tk not in seen:
            seen.add(tk)
            out.append(float(e))
    if out[-1] != total_epochs:
        out[-1] = float(total_epochs)
    return out


def run_variant(problem, lam, variant, total_epochs: float, n_checkpoints: int = 20,
                master_seed: int = 0, jvp_samples: int = 1, reference=None,
                epochs: list | None = None) -> RunRecord:
    """Squared hypergradient error of one variant at log-spaced epoch budgets.

    Every checkpoint is a fresh estimate on its own streams
    ``(3j, 3j+1, 3j+2)`` of ``master_seed``, so checkpoints are independent
    and any one can be recomputed alone.
    """
    spec = get_variant(variant)
    lam = problem.check_lam(lam)
    ref = reference_gradient(problem, lam) if reference is None else np.asarray(reference)
    n, b = problem.n_samples, problem.batch_size
    base = estimator_for_variant(problem, lam, spec, 0, 0, jvp_samples)
    if epochs is None:
        epochs = checkpoint_epochs(problem, spec, total_epochs, n_checkpoints)
    rec = RunRecord(run_id=f"{spec.name}-{master_seed}", variant=spec.name, seed=master_seed)
    t = k = 0
    for j, e in enumerate(epochs):
        t, k = epoch_budget_to_iters(spec, e, n, b, b)
        est = base.with_iters(t, k).run(problem, lam, master_seed, (3 * j, 3 * j + 1, 3 * j + 2))
        rec.checkpoints.append((float(e), float(np.sum((est.grad - ref) ** 2))))
    rec.t, rec.k = t, k
    return rec


def _run_job(args):
    problem, lam, variant, total_epochs, n_checkpoints, seed, jvp_samples, ref = args
    return run_variant(problem, lam, variant, total_epochs, n_checkpoints, seed, jvp_samples, ref)


def run_many(problem, lam, variants, total_epochs: float, seeds, n_checkpoints: int = 20,
             jvp_samples: int = 1, workers: int = 1) -> list:
    """All ``variants x seeds`` runs, ordered by variant then seed regardless of ``workers``."""
    ref = reference_gradient(problem, lam)
    jobs = [(problem, lam, v, total_epochs, n_checkpoints, s, jvp_samples, ref)
            for v in variants for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


@dataclass(frozen=True)
class Curve:
    variant: str
    epochs: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def aggregate_runs(records) -> Curve:
    """Pointwise mean and population standard deviation of aligned runs."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    epochs = np.array([e for e, _ in records[0].checkpoints])
    errs = []
    for r in records:
        ep = np.array([e for e, _ in r.checkpoints])
        if ep.shape != epochs.shape or not np.array_equal(ep, epochs):
            raise ValueError(f"record {r.run_id} has misaligned checkpoints")
        errs.append([err for _, err in r.checkpoints])
    errs = np.array(errs)
    names = {r.variant for r in records}
    return Curve(records[0].variant if len(names) == 1 else "+".join(sorted(names)),
                 epochs, errs.mean(axis=0), errs.std(axis=0))


@dataclass(frozen=True)
class Moments:
    mse: float
    bias_sq: float
    variance: float
    mse_std: float      # Monte-Carlo standard error of ``mse``
    bias_std: float     # standard error of the replicate mean, sqrt(variance / N)
    n: int


def _chunk_size(problem, n_replicates):
    # keep a minibatched iterate block near 2e7 floats
    per_row = max(1, problem.d) * max(1, min(problem.batch_size, problem.n_samples))
    return max(1, min(n_replicates, int(2e7 // per_row)))


def empirical_moments(problem, lam, config: EstimatorConfig, n_replicates: int,
                      master_seed: int = 0, reference=None, return_grads: bool = False):
    """Replicate MSE, squared bias and variance against the reference gradient.

    Replicates run as batched rows; chunk ``c`` uses streams
    ``(3c, 3c+1, 3c+2)`` so the result depends only on the arguments.
    """
    if n_replicates < 2:
        raise ValueError("n_replicates must be >= 2")
    lam = problem.check_lam(lam)
    ref = reference_gradient(problem, lam) if reference is None else np.asarray(reference)
    chunk = _chunk_size(problem, n_replicates)
    grads = []
    for c, start in enumerate(range(0, n_replicates, chunk)):
        r = min(chunk, n_replicates - start)
        grads.append(config.run(problem, lam, master_seed, (3 * c, 3 * c + 1, 3 * c + 2),
                                n_replicates=r).grad)
    G = np.concatenate(grads, axis=0)
    sq = np.sum((G - ref) ** 2, axis=1)
    # centring on the first replicate makes identical replicates give exactly zero variance
    gbar = G[0] + (G - G[0]).mean(axis=0)
    variance = float(np.mean(np.sum((G - gbar) ** 2, axis=1)))
    mom = Moments(
        mse=float(sq.mean()),
        bias_sq=float(np.sum((gbar - ref) ** 2)),
        variance=variance,
        mse_std=float(sq.std(ddof=1) / math.sqrt(n_replicates)),
        bias_std=math.sqrt(variance / n_replicates),
        n=n_replicates,
    )
    return (mom, G) if return_grads else mom


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


RECORD_HEADER = ["run_id", "variant", "seed", "epoch", "sq_error"]
CURVE_HEADER = ["variant", "epoch", "mean", "std"]


def export_csv(items, path) -> Path:
    """Write run records or curves, with 17 significant digits and stable row order."""
    items = list(items)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if items and isinstance(items[0], Curve):
        w.writerow(CURVE_HEADER)
        for c in items:
            for e, m, s in zip(c.epochs, c.mean, c.std):
                w.writerow([c.variant, _fmt(e), _fmt(m), _fmt(s)])
    else:
        w.writerow(RECORD_HEADER)
        for r in items:
            for e, err in r.checkpoints:
                w.writerow([r.run_id, r.variant, _fmt(r.seed), _fmt(e), _fmt(err)])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list:
    """Rows of a CSV written by :func:`export_csv`, numeric columns as floats."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("epoch", "sq_error", "mean", "std"):
            if key in row:
                row[key] = float(row[key])
    return rows


def bound_overlay(problem, lam, pairs, beta: float | None = None, gamma: float | None = None,
                  consts=None) -> list:
    """MSE bound rows ``{t, k, rho, sigma, total, floor, indicative}`` for decreasing steps.

    ``beta``/``gamma`` default to ``2/(1-q^2)`` and ``beta (1 + sigma_lam2)``,
    the smallest choice that the linear-system rate admits.
    """
    lam = problem.check_lam(lam)
    consts = problem.constants(lam) if consts is None else consts
    q = consts.q
    beta = 2.0 / (1.0 - q * q) if beta is None else beta
    s2 = 2.0 * (consts.L_PhiTilde ** 2 + q * q) / (1.0 - q) ** 2
    gamma = beta * (1.0 + s2) if gamma is None else gamma
    w_norm = float(np.linalg.norm(problem.fixed_point(lam)))
    d_w, d_v, _, _ = bounds.subproblem_rate_constants(consts, beta, gamma, w_norm, consts.L_E)
    rho, sig = bounds.RateFunction.power_law(d_w, gamma), bounds.RateFunction.power_law(d_v, gamma)
    rows = []
    for t, k in pairs:
        b = bounds.mse_bound(consts, rho(t), sig(k))
        rows.append({"t": int(t), "k": int(k), "rho": rho(t), "sigma": sig(k),
                     "total": b.total, "floor": b.floor, "indicative": int(b.indicative)})
    return rows
