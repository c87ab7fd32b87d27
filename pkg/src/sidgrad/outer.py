"""Projected SGD on the hyperparameters driven by SID hypergradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteError
from .harness import epoch_budget_to_iters, estimator_for_variant, get_variant, reference_gradient

__all__ = ["HyperDomain", "HypergradConfig", "OuterStep", "OuterTrace", "outer_sgd", "evaluate",
           "exp_uniform_init"]


@dataclass(frozen=True)
class HyperDomain:
    """Closed convex hyperparameter set with its Euclidean projection.

    ``box(lower, upper)``, ``positive_orthant(lam_min)`` (``lam >= lam_min``)
    or ``unconstrained``.
    """

    kind: str = "unconstrained"
    lower: object = None
    upper: object = None
    lam_min: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "positive_orthant", "unconstrained"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "box":
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if np.any(lo > hi):
                raise ValueError("box needs lower <= upper")
        if self.kind == "positive_orthant" and self.lam_min < 0:
            raise ValueError("lam_min must be >= 0")

    @classmethod
    def box(cls, lower, upper):
        return cls("box", lower=lower, upper=upper)

    @classmethod
    def positive_orthant(cls, lam_min: float = 0.0):
        return cls("positive_orthant", lam_min=float(lam_min))

    @classmethod
    def unconstrained(cls):
        return cls("unconstrained")

    def project(self, lam) -> np.ndarray:
        lam = np.array(lam, dtype=np.float64)
        if self.kind == "box":
            return np.clip(lam, np.asarray(self.lower, float), np.asarray(self.upper, float))
        if self.kind == "positive_orthant":
            return np.maximum(lam, self.lam_min)
        return lam

    def contains(self, lam) -> bool:
        lam = np.asarray(lam, dtype=np.float64)
        return bool(np.array_equal(self.project(lam), lam))


@dataclass(frozen=True)
class HypergradConfig:
    """Per-outer-step hypergradient recipe.

    ``estimator="sid"`` runs ``variant`` within ``epochs``; ``"oracle"``
    uses the reference hypergradient.  ``log_space`` takes the SGD step on
    ``log lam`` (needs ``lam > 0``).
    """

    variant: str = "StochDec"
    epochs: float = 20.0
    estimator: str = "sid"
    log_space: bool = False
    jvp_samples: int = 1

    def __post_init__(self):
        if self.estimator not in ("sid", "oracle"):
            raise ValueError("estimator must be 'sid' or 'oracle'")
        get_variant(self.variant)
        if not self.epochs > 0:
            raise ValueError("epochs must be > 0")


@dataclass
class OuterStep:
    step: int
    lam: np.ndarray
    grad: np.ndarray
    f_val: float
    accuracy: float
    epochs: float


@dataclass
class OuterTrace:
    steps: list = field(default_factory=list)
    status: str = "ok"

    @property
    def lams(self) -> np.ndarray:
        return np.array([s.lam for s in self.steps])

    @property
    def f_values(self) -> np.ndarray:
        return np.array([s.f_val for s in self.steps])


def exp_uniform_init(m: int, seed: int = 0, low: float = -2.0, high: float = 2.0) -> np.ndarray:
    """``lam_i = exp(eps_i)`` with ``eps_i ~ U[low, high]``."""
    from .core import SampleKey
    return np.exp(SampleKey(seed, 0, 0).generator().uniform(low, high, m))


def _upper_at_solution(problem, lam):
    if not problem.has_fixed_point:
        return math.nan
    return float(problem.upper_value(problem.fixed_point(lam), lam))


def outer_sgd(problem, lam0, domain: HyperDomain, outer_steps: int, outer_lr: float,
              hypergrad_config: HypergradConfig = HypergradConfig(), warm_start: bool = False,
              master_seed: int = 0, eval_set=None, record_f: bool = True) -> OuterTrace:
    """``lam <- project(lam - lr * grad_hat)`` for ``outer_steps`` steps.

    Row ``s`` of the trace holds ``lam_s``, the hypergradient estimated at
    it, the upper objective at the exact lower solution (when ``record_f``)
    and the cumulative epochs spent.  Step ``s`` draws from streams
    ``(3s, 3s+1, 3s+2)``.  With ``warm_start`` the lower solver starts from
    the previous step's iterate.  A non-finite ``lam`` or estimate stops
    the loop and marks the trace ``aborted``.
    """
    lam = problem.check_lam(lam0)
    if not domain.contains(lam):
        raise ValueError("lam0 is not in the domain")
    if outer_steps < 0:
        raise ValueError("outer_steps must be >= 0")
    cfg = hypergrad_config
    if cfg.log_space and np.any(lam <= 0):
        raise ValueError("log-space steps need lam0 > 0")
    trace = OuterTrace()
    w_prev = None
    spent = 0.0
    spec = get_variant(cfg.variant)
    n, b = problem.n_samples, problem.batch_size
    for s in range(outer_steps):
        try:
            if cfg.estimator == "oracle":
                grad = reference_gradient(problem, lam)
            else:
                t, k = epoch_budget_to_iters(spec, cfg.epochs, n, b, b)
                est = estimator_for_variant(problem, lam, spec, t, k, cfg.jvp_samples).run(
                    problem, lam, master_seed, (3 * s, 3 * s + 1, 3 * s + 2),
                    w0=w_prev if warm_start else None)
                grad = est.grad
                w_prev = est.w_hat
                spent += est.epoch_cost
        except (NonFiniteError, FloatingPointError) as exc:
            trace.status = f"aborted at step {s}: {exc}"
            return trace
        f_val, acc = math.nan, math.nan
        if eval_set is not None:
            metrics = evaluate(problem, lam, eval_set)
            f_val, acc = metrics["val_loss"], metrics["accuracy"]
        elif record_f:
            f_val = _upper_at_solution(problem, lam)
        trace.steps.append(OuterStep(s, lam.copy(), np.array(grad), f_val, acc, spent))
        with np.errstate(over="ignore", invalid="ignore"):
            if cfg.log_space:
                new = np.exp(np.log(lam) - outer_lr * grad * lam)
            else:
                new = lam - outer_lr * grad
            new = domain.project(new)
        if not np.all(np.isfinite(new)):
            trace.status = f"aborted at step {s}: non-finite hyperparameter"
            return trace
        lam = new
    return trace


def evaluate(problem, lam, eval_set=None) -> dict:
    """Mean loss and 0/1 accuracy of the lower-level solution on ``eval_set``.

    ``eval_set`` is ``(X, labels)`` or a :class:`~sidgrad.data.Dataset`;
    ``None`` uses the problem's validation data.  Binary labels are
    ``{-1, +1}``.  Rows whose scores tie (all equal) go to the majority
    label of ``eval_set``.
    """
    lam = problem.check_lam(lam)
    w = problem.fixed_point(lam, tol=1e-10)
    if eval_set is None:
        X, y = problem.X_val, getattr(problem, "y_val", getattr(problem, "labels_val", None))
    elif hasattr(eval_set, "X"):
        X, y = eval_set.X, eval_set.y
    else:
        X, y = eval_set
    X, y = np.asarray(X, dtype=np.float64), np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("eval_set is empty")
    scores = problem.predict(w, X)
    values, counts = np.unique(y, return_counts=True)
    majority = values[np.argmax(counts)]
    if scores.ndim == 1:
        loss = np.logaddexp(0.0, -y * scores)
        pred = np.where(scores > 0, 1, np.where(scores < 0, -1, majority))
    else:
        z = scores - scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = lse - z[np.arange(len(y)), y.astype(int)]
        pred = np.argmax(scores, axis=1)
        tied = np.all(scores == scores[:, :1], axis=1)
        pred = np.where(tied, majority, pred)
    return {"val_loss": float(loss.mean()), "accuracy": float(np.mean(pred == y))}
