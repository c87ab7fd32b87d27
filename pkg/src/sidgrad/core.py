"""Problem abstraction, counter-based randomness and constant estimation.

Every sampled capability of a problem is a pure function of its inputs and a
:class:`SampleKey`.  Arrays of iterates may carry a leading replicate axis
``(R, d)``; rows of a batched call receive mutually independent draws.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "NonFiniteError",
    "ContractionWarning",
    "SampleKey",
    "Stream",
    "as_realvec",
    "StochasticFixedPointProblem",
    "ProblemConstants",
    "UnbiasednessReport",
    "VarianceEstimate",
    "check_unbiasedness",
    "estimate_contraction",
    "estimate_variance_constants",
]

_MASK64 = (1 << 64) - 1


class NonFiniteError(FloatingPointError):
    """Raised when a sample, iterate or estimate contains NaN or Inf.

    ``context`` carries whatever identifies the offending evaluation
    (a :class:`SampleKey`, an iteration index, or solver metadata).
    """

    def __init__(self, message: str, context=None):
        super().__init__(message)
        self.context = context


class ContractionWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class SampleKey:
    """Identifies one realisation of the random variable.

    Identical keys reproduce identical draws; keys differing in any field
    give independent draws (distinct Philox keys or counter blocks).
    """

    master_seed: int
    stream_id: int
    counter: int

    def __post_init__(self):
        if min(self.master_seed, self.stream_id, self.counter) < 0:
            raise ValueError(f"SampleKey fields must be non-negative: {self}")

    def generator(self) -> np.random.Generator:
        # The counter occupies the second 64-bit word so each key owns 2**64
        # Philox blocks and consecutive counters never overlap.
        # explicit uint64 arrays: plain int lists above 2**63 lose bits
        bitgen = np.random.Philox(
            key=np.array([self.master_seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64),
            counter=np.array([0, self.counter & _MASK64, (self.counter >> 64) & _MASK64, 0],
                             dtype=np.uint64),
        )
        return np.random.Generator(bitgen)


@dataclass(frozen=True)
class Stream:
    """A range of consecutive keys ``(master_seed, stream_id, start + i)``."""

    master_seed: int
    stream_id: int
    start: int = 0

    def key(self, i: int) -> SampleKey:
        return SampleKey(self.master_seed, self.stream_id, self.start + i)

    def keys(self, n: int) -> Iterator[SampleKey]:
        return (self.key(i) for i in range(n))

    def advanced(self, n: int) -> "Stream":
        return dataclasses.replace(self, start=self.start + n)


def as_realvec(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate ``x`` as a finite float64 vector (optionally of length ``dim``)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Constants


_CONSTANT_FIELDS = (
    "q", "L_E", "nu1", "nu2", "mu1", "mu2", "L_Phi", "L_PhiTilde", "m2",
    "sigma1_lower", "sigma2_lower", "sigma_lam1", "sigma_lam2",
)


@dataclass(frozen=True)
class ProblemConstants:
    """Regularity constants of a problem at a fixed hyperparameter.

    ``sigma1_lower``/``sigma2_lower`` bound the variance of the lower-level
    map as ``Var <= sigma1 + sigma2 * ||T(w) - w||**2``.  ``sigma_lam1`` is
    twice the variance of the map at the fixed point and ``sigma_lam2`` the
    Lipschitz-derived multiplicative constant used by the decreasing-step
    rate constants.  Names listed in ``estimated`` come from Monte-Carlo or
    numerical estimates rather than closed forms.
    """

    q: float
    L_E: float = 0.0
    nu1: float = 0.0
    nu2: float = 0.0
    mu1: float = 0.0
    mu2: float = 0.0
    L_Phi: float = 0.0
    L_PhiTilde: float = 0.0
    m2: float = 0.0
    sigma1_lower: float = 0.0
    sigma2_lower: float = 0.0
    sigma_lam1: float = 0.0
    sigma_lam2: float = 0.0
    estimated: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"contraction modulus must lie in [0, 1), got {self.q}")
        for name in _CONSTANT_FIELDS[1:]:
            val = getattr(self, name)
            if not (val >= 0.0 and math.isfinite(val)):
                raise ValueError(f"constant {name} must be finite and >= 0, got {val}")
        unknown = set(self.estimated) - set(_CONSTANT_FIELDS)
        if unknown:
            raise ValueError(f"unknown constant names flagged estimated: {sorted(unknown)}")
        object.__setattr__(self, "estimated", frozenset(self.estimated))

    def flag(self, name: str) -> str:
        return "estimated" if name in self.estimated else "analytic"

    @property
    def indicative(self) -> bool:
        return bool(self.estimated)

    def replace(self, **changes) -> "ProblemConstants":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in _CONSTANT_FIELDS}
        out["estimated"] = sorted(self.estimated)
        return out


# ---------------------------------------------------------------------------
# Problem interface


class StochasticFixedPointProblem:
    """Bilevel problem whose lower level is the fixed point of ``Phi(., lam)``.

    Subclasses implement the mean map, its sampled counterpart and the
    Jacobian-transpose products, plus the upper objective ``E``.  All
    ``w``/``v`` arguments may be ``(d,)`` or batched ``(R, d)``; ``lam`` is
    always a single ``(m,)`` vector.
    """

    d: int
    m: int
    #: Training-set size and minibatch size, for epoch accounting.
    n_samples: int = 1
    batch_size: int = 1
    #: True when d1 Phi is symmetric (gradient-descent maps).
    jacobian_symmetric: bool = False
    #: True when d2 Phi_hat does not depend on the sample key.
    separable: bool = False

    # -- lower-level map
    def phi_mean(self, w, lam):
        raise NotImplementedError

    def phi_sample(self, w, lam, key: SampleKey):
        raise NotImplementedError

    def jvp1_t_mean(self, w, lam, v):
        raise NotImplementedError

    def jvp1_t_sample(self, w, lam, key: SampleKey, v):
        raise NotImplementedError

    def jvp2_t_mean(self, w, lam, v):
        raise NotImplementedError

    def jvp2_t_sample(self, w, lam, key: SampleKey, v):
        raise NotImplementedError

    # -- upper objective
    def upper_value(self, w, lam):
        raise NotImplementedError

    def upper_grad1(self, w, lam):
        raise NotImplementedError

    def upper_grad2(self, w, lam):
        raise NotImplementedError

    # -- optional oracles
    def fixed_point(self, lam) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no fixed-point oracle")

    def exact_hypergrad(self, lam) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no hypergradient oracle")

    @property
    def has_fixed_point(self) -> bool:
        return type(self).fixed_point is not StochasticFixedPointProblem.fixed_point

    @property
    def has_exact_hypergrad(self) -> bool:
        return type(self).exact_hypergrad is not StochasticFixedPointProblem.exact_hypergrad

    def constants(self, lam) -> ProblemConstants:
        raise NotImplementedError

    def check_lam(self, lam) -> np.ndarray:
        return as_realvec(lam, self.m, name="lambda")


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class UnbiasednessReport:
    mean_gap: float
    mc_std: float

    @property
    def ok(self) -> bool:
        return self.mean_gap <= 4.0 * self.mc_std + 1e-12


def _sampled_and_mean(problem, which, w, lam, v):
    if which == "phi":
        return (lambda key: problem.phi_sample(w, lam, key)), problem.phi_mean(w, lam)
    if which == "jvp1":
        return (lambda key: problem.jvp1_t_sample(w, lam, key, v)), problem.jvp1_t_mean(w, lam, v)
    if which == "jvp2":
        return (lambda key: problem.jvp2_t_sample(w, lam, key, v)), problem.jvp2_t_mean(w, lam, v)
    raise ValueError(f"unknown capability {which!r}; expected phi, jvp1 or jvp2")


def _collect(sample, n, master_seed, stream_id):
    out = []
    for key in Stream(master_seed, stream_id).keys(n):
        s = np.asarray(sample(key), dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise NonFiniteError(f"non-finite sample at {key}", key)
        out.append(s)
    return np.stack(out)


def check_unbiasedness(problem, w, lam, n_samples: int, master_seed: int = 0,
                       which: str = "phi", v=None, stream_id: int = 0) -> UnbiasednessReport:
    """Compare the empirical mean of a sampled capability with its mean.

    ``mean_gap`` is the norm of the difference; ``mc_std`` is the Monte-Carlo
    standard error of that norm, ``sqrt(trace Cov / N)``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    w = np.asarray(w, dtype=np.float64)
    lam = problem.check_lam(lam)
    if v is None and which != "phi":
        v = np.ones(problem.d) / math.sqrt(problem.d)
    sample, mean = _sampled_and_mean(problem, which, w, lam, v)
    draws = _collect(sample, n_samples, master_seed, stream_id)
    # centre on the first draw so identical draws give an exactly zero gap
    dev = draws - draws[0]
    gap = float(np.linalg.norm(draws[0] + dev.mean(axis=0) - mean))
    tr_var = float(dev.var(axis=0, ddof=1).sum())
    return UnbiasednessReport(gap, math.sqrt(tr_var / n_samples))


def _forward_jvp(problem, w, lam, u, h=1e-6):
    # d1 Phi u by central differences; only used for non-symmetric Jacobians.
    scale = h * max(1.0, float(np.linalg.norm(w)))
    return (problem.phi_mean(w + scale * u, lam) - problem.phi_mean(w - scale * u, lam)) / (2 * scale)


def _spectral_norm(problem, w, lam, n_iters, rng, tol=1e-13):
    d = problem.d
    if problem.jacobian_symmetric:
        def gram(u):
            return problem.jvp1_t_mean(w, lam, problem.jvp1_t_mean(w, lam, u))
    else:
        def gram(u):
            return _forward_jvp(problem, w, lam, problem.jvp1_t_mean(w, lam, u))
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    est = 0.0
    for _ in range(max(1, n_iters)):
        g = gram(u)
        nrm = float(np.linalg.norm(g))
        if nrm == 0.0:
            return 0.0
        new = math.sqrt(nrm)
        u = g / nrm
        if abs(new - est) <= tol * max(new, 1e-300):
            est = new
            break
        est = new
    return est


def estimate_contraction(problem, lam, n_probe_points: int = 4, n_power_iters: int = 500,
                         master_seed: int = 0) -> float:
    """Largest estimated spectral norm of ``d1 Phi(w, lam)`` over probe points.

    Probes are the origin plus standard-normal points.  The norm comes from
    power iteration on ``J J^T`` (``J^T J^T`` when ``J`` is symmetric).
    Emits :class:`ContractionWarning` when the estimate is not below one.
    """
    if n_probe_points < 1:
        raise ValueError("n_probe_points must be >= 1")
    lam = problem.check_lam(lam)
    rng = SampleKey(master_seed, 0, 0).generator()
    probes = [np.zeros(problem.d)]
    probes += [rng.standard_normal(problem.d) for _ in range(n_probe_points - 1)]
    q_est = max(_spectral_norm(problem, w, lam, n_power_iters, rng) for w in probes)
    if q_est >= 1.0:
        warnings.warn(f"not a verified contraction: estimated modulus {q_est:.6g} >= 1",
                      ContractionWarning, stacklevel=2)
    return q_est


@dataclass(frozen=True)
class VarianceEstimate:
    sigma1_hat: float
    m2_hat: float
    flags: tuple = (("sigma1_hat", "estimated"), ("m2_hat", "estimated"))


def estimate_variance_constants(problem, lam, w_probe, n_samples: int = 2000,
                                master_seed: int = 0, n_probes: int = 8) -> VarianceEstimate:
    """Monte-Carlo proxies for the variance constants at ``w_probe``.

    ``sigma1_hat`` is twice the trace variance of ``phi_sample``.  ``m2_hat``
    is the largest trace variance of ``d2 Phi_hat^T u`` over random unit
    directions ``u``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    lam = problem.check_lam(lam)
    w = np.asarray(w_probe, dtype=np.float64)
    draws = _collect(lambda key: problem.phi_sample(w, lam, key), n_samples, master_seed, 0)
    sigma1 = 2.0 * float((draws - draws[0]).var(axis=0, ddof=1).sum())
    rng = SampleKey(master_seed, 1, 0).generator()
    m2 = 0.0
    for i in range(n_probes):
        u = rng.standard_normal(problem.d)
        u /= np.linalg.norm(u)
        prods = _collect(lambda key: problem.jvp2_t_sample(w, lam, key, u),
                         n_samples, master_seed, 2 + i)
        m2 = max(m2, float((prods - prods[0]).var(axis=0, ddof=1).sum()))
    return VarianceEstimate(sigma1, m2)
