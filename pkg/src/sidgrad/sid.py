"""The SID hypergradient estimator and its deterministic counterpart.

An estimate runs three solvers on three independent key streams:

* stream A drives the lower-level iteration ``w <- KM(Phi_hat(., lam))``;
* stream B drives the linear system ``v <- KM(Psi_hat_w)``, with
  ``Psi_hat_w(v) = d1 Phi_hat(w)' v + grad_1 E(w)``;
* stream C supplies the final samples of ``d2 Phi_hat(w)' v``.

Passing ``n_replicates=R`` runs ``R`` independent estimates at once; the
iterates then carry a leading ``(R, .)`` axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteError, StochasticFixedPointProblem, Stream
from .fixpoint import StepSchedule, Trajectory, km_run

__all__ = [
    "HypergradEstimate",
    "LinearSystemMap",
    "solve_lower",
    "make_linear_map",
    "solve_linear",
    "sid_estimate",
    "aid_batch",
    "quadratic_form_value",
    "DEFAULT_STREAMS",
]

DEFAULT_STREAMS = (0, 1, 2)
_UNIT = StepSchedule.constant(1.0)


@dataclass(frozen=True)
class HypergradEstimate:
    grad: np.ndarray            # (m,) or (R, m)
    t: int
    k: int
    jvp_samples: int
    seeds: tuple                # (master_seed, stream_w, stream_v, stream_zeta)
    variant_tag: str = "sid"
    epoch_cost: float = 0.0
    w_hat: np.ndarray | None = field(default=None, repr=False)
    v_hat: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.t < 0 or self.k < 0:
            raise ValueError("t and k must be >= 0")
        if self.jvp_samples < 1:
            raise ValueError("jvp_samples must be >= 1")
        if len(set(self.seeds[1:])) != 3:
            raise ValueError(f"stream ids must be pairwise distinct, got {self.seeds[1:]}")


@dataclass(frozen=True)
class LinearSystemMap:
    """Affine map ``v -> d1 Phi(w, lam)' v + grad_1 E(w, lam)`` at a frozen base point."""

    problem: StochasticFixedPointProblem
    w: np.ndarray
    lam: np.ndarray
    grad1E: np.ndarray

    def psi_mean(self, v):
        return self.problem.jvp1_t_mean(self.w, self.lam, v) + self.grad1E

    def psi_sample(self, v, key):
        return self.problem.jvp1_t_sample(self.w, self.lam, key, v) + self.grad1E

    def solve_dense(self) -> np.ndarray:
        """``v(w) = (I - d1 Phi')^{-1} grad_1 E`` by assembling the matrix (small ``d`` only)."""
        if self.w.ndim != 1:
            raise ValueError("solve_dense needs an unbatched base point")
        d = self.w.shape[0]
        J_t = np.column_stack([self.problem.jvp1_t_mean(self.w, self.lam, e) for e in np.eye(d)])
        return np.linalg.solve(np.eye(d) - J_t, self.grad1E)


def _start(problem, w0, n_replicates):
    if w0 is not None:
        w0 = np.array(w0, dtype=np.float64)
        if n_replicates is not None and w0.ndim == 1:
            w0 = np.broadcast_to(w0, (n_replicates, problem.d)).copy()
        return w0
    shape = (problem.d,) if n_replicates is None else (n_replicates, problem.d)
    return np.zeros(shape)


def solve_lower(problem, lam, t: int, schedule: StepSchedule, stream: Stream, w0=None,
                stochastic: bool = True, n_replicates: int | None = None,
                record_every: int = 0) -> Trajectory:
    """``t`` relaxed iterations on ``w -> Phi_hat(w, lam, zeta)`` from ``w0`` (zero by default).

    ``stochastic=False`` uses the mean map and consumes no randomness.
    """
    lam = problem.check_lam(lam)
    if stochastic:
        def step(w, key):
            return problem.phi_sample(w, lam, key)
    else:
        def step(w, key):
            return problem.phi_mean(w, lam)
    return km_run(step, _start(problem, w0, n_replicates), schedule, t, stream, record_every)


def make_linear_map(problem, w, lam) -> LinearSystemMap:
    lam = problem.check_lam(lam)
    w = np.array(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("base point has non-finite entries")
    g = np.array(problem.upper_grad1(w, lam), dtype=np.float64)
    w.setflags(write=False)
    g.setflags(write=False)
    return LinearSystemMap(problem, w, lam, g)


def solve_linear(problem, w, lam, k: int, schedule: StepSchedule, stream: Stream,
                 stochastic: bool = True, record_every: int = 0,
                 linear_map: LinearSystemMap | None = None) -> Trajectory:
    """``k`` relaxed iterations on the linear-system map at ``w``, from ``v = 0``."""
    lmap = make_linear_map(problem, w, lam) if linear_map is None else linear_map
    if stochastic:
        def step(v, key):
            return lmap.psi_sample(v, key)
    else:
        def step(v, key):
            return lmap.psi_mean(v)
    return km_run(step, np.zeros_like(lmap.grad1E), schedule, k, stream, record_every)


def _epoch_cost(problem, t, k, lower_stochastic, linear_stochastic):
    n = problem.n_samples
    b_ll = problem.batch_size if lower_stochastic else n
    b_ls = problem.batch_size if linear_stochastic else n
    return (t * b_ll + k * b_ls) / n


def sid_estimate(problem, lam, t: int, k: int, lower_schedule: StepSchedule,
                 linear_schedule: StepSchedule | None = None, master_seed: int = 0,
                 jvp_samples: int = 1, streams: tuple = DEFAULT_STREAMS, w0=None,
                 n_replicates: int | None = None, lower_stochastic: bool = True,
                 linear_stochastic: bool = True, final_stochastic: bool = True,
                 variant_tag: str = "sid") -> HypergradEstimate:
    """Stochastic implicit-differentiation estimate of the hypergradient at ``lam``.

    ``linear_schedule`` defaults to ``lower_schedule``.  The final product
    ``d2 Phi_hat(w_t)' v_k`` is averaged over ``jvp_samples`` independent keys.
    ``*_stochastic=False`` swaps the corresponding sampled capability for its
    mean, which is how mixed batch/stochastic variants are built.
    """
    if t < 0 or k < 0:
        raise ValueError("t and k must be >= 0")
    if jvp_samples < 1:
        raise ValueError("jvp_samples must be >= 1")
    if len(set(streams)) != 3:
        raise ValueError(f"stream ids must be pairwise distinct, got {streams}")
    lam = problem.check_lam(lam)
    linear_schedule = lower_schedule if linear_schedule is None else linear_schedule
    sA, sB, sC = (Stream(master_seed, s) for s in streams)
    seeds = (master_seed,) + tuple(streams)

    try:
        w_hat = solve_lower(problem, lam, t, lower_schedule, sA, w0, lower_stochastic, n_replicates).final
        v_hat = solve_linear(problem, w_hat, lam, k, linear_schedule, sB, linear_stochastic).final
    except NonFiniteError as exc:
        raise NonFiniteError(f"{exc} (t={t}, k={k}, seeds={seeds})", (t, k, seeds)) from exc

    grad = np.array(problem.upper_grad2(w_hat, lam), dtype=np.float64)
    if final_stochastic:
        acc = problem.jvp2_t_sample(w_hat, lam, sC.key(0), v_hat)
        for j in range(1, jvp_samples):
            acc = acc + problem.jvp2_t_sample(w_hat, lam, sC.key(j), v_hat)
        if jvp_samples > 1:
            acc = acc / jvp_samples
    else:
        acc = problem.jvp2_t_mean(w_hat, lam, v_hat)
    grad = grad + acc
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite hypergradient (t={t}, k={k}, seeds={seeds})", (t, k, seeds))
    return HypergradEstimate(
        grad=grad, t=t, k=k, jvp_samples=jvp_samples, seeds=seeds, variant_tag=variant_tag,
        epoch_cost=_epoch_cost(problem, t, k, lower_stochastic, linear_stochastic),
        w_hat=w_hat, v_hat=v_hat,
    )


def aid_batch(problem, lam, t: int, k: int, w0=None) -> HypergradEstimate:
    """Deterministic fixed-point AID: mean maps, unit steps, exact final product."""
    return sid_estimate(problem, lam, t, k, _UNIT, _UNIT, master_seed=0, w0=w0,
                        lower_stochastic=False, linear_stochastic=False,
                        final_stochastic=False, variant_tag="Batch")


def _step_size(problem, lam) -> float:
    if hasattr(problem, "step_constants"):
        return problem.step_constants(lam)[2]
    if hasattr(problem, "alpha"):
        return float(problem.alpha)
    raise TypeError(f"{type(problem).__name__} is not a gradient-step problem")


def quadratic_form_value(problem, v, w, lam) -> float:
    """``(alpha/2) v' H v - v' grad_1 E`` with ``H`` the lower-level Hessian at ``w``.

    Its minimizer is the linear-system solution ``v(w)``; diagnostic only.
    """
    if not hasattr(problem, "lower_hvp"):
        raise TypeError(f"{type(problem).__name__} does not expose a lower-level Hessian")
    lam = problem.check_lam(lam)
    alpha = _step_size(problem, lam)
    v = np.asarray(v, dtype=np.float64)
    Hv = problem.lower_hvp(w, lam, v)
    return float(0.5 * alpha * v @ Hv - v @ problem.upper_grad1(w, lam))
