"""Closed-form error bounds and rate constants for SID and its subsolvers.

All functions are pure.  Any ``(1 - q)`` denominator below
:data:`MIN_GAP` raises ``ValueError`` instead of returning an inflated
number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .core import ProblemConstants

__all__ = [
    "MIN_GAP",
    "RateFunction",
    "MSEBound",
    "c1_constant",
    "bias_bound",
    "variance_bounds",
    "mse_bound",
    "km_constant_envelope",
    "km_decreasing_c",
    "sgd_rates",
    "bottou_rates",
    "subproblem_rate_constants",
    "sid_power_law_bound",
]

MIN_GAP = 1e-12


def _gap(q: float) -> float:
    if q < 0:
        raise ValueError(f"q must be >= 0, got {q}")
    gap = 1.0 - q
    if gap < MIN_GAP:
        raise ValueError(f"1 - q = {gap:.3g} is below {MIN_GAP}: bound undefined")
    return gap


def _nonneg(**vals):
    for name, v in vals.items():
        if v < 0 or math.isnan(v):
            raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class RateFunction:
    """Mean-square rate ``t -> value`` of a subproblem solver.

    ``power_law``: ``c / (gamma + t)``; ``geometric``:
    ``r**t * (init - floor) + floor``; ``zero``: identically zero.
    """

    kind: str
    c: float = 0.0
    gamma: float = 0.0
    r: float = 0.0
    floor: float = 0.0
    init: float = 0.0

    def __post_init__(self):
        if self.kind not in ("power_law", "geometric", "zero"):
            raise ValueError(f"unknown rate kind {self.kind!r}")
        if self.kind == "geometric" and not 0.0 <= self.r < 1.0:
            raise ValueError("geometric rate needs r in [0, 1)")
        if self.kind == "power_law" and (self.c < 0 or self.gamma <= 0):
            raise ValueError("power law needs c >= 0 and gamma > 0")

    @classmethod
    def power_law(cls, c, gamma):
        return cls("power_law", c=float(c), gamma=float(gamma))

    @classmethod
    def geometric(cls, r, floor, init):
        return cls("geometric", r=float(r), floor=float(floor), init=float(init))

    @classmethod
    def zero(cls):
        return cls("zero")

    def __call__(self, t) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "power_law":
            return self.c / (self.gamma + t)
        return max(0.0, self.r ** t * (self.init - self.floor) + self.floor)


def c1_constant(consts: ProblemConstants) -> float:
    """Bias-control constant of the hypergradient estimator."""
    gap = _gap(consts.q)
    return (consts.mu2
            + (consts.mu1 * consts.L_Phi + consts.nu1 * consts.L_E) / gap
            + consts.nu1 * consts.L_E * consts.L_Phi / gap ** 2)


def bias_bound(consts: ProblemConstants, rho_t: float, sigma_k: float) -> float:
    """Upper bound on ``||E[grad_hat] - grad||``."""
    _nonneg(rho_t=rho_t, sigma_k=sigma_k)
    c1 = c1_constant(consts)
    sr, ss = math.sqrt(rho_t), math.sqrt(sigma_k)
    return c1 * sr + consts.L_Phi * ss + consts.nu2 * sr * ss


def variance_bounds(consts: ProblemConstants, rho_t: float, sigma_k: float) -> tuple[float, float]:
    """Bounds on ``E[Var[grad_hat | w_t]]`` (inner) and ``Var[E[grad_hat | w_t]]`` (outer)."""
    _nonneg(rho_t=rho_t, sigma_k=sigma_k)
    gap = _gap(consts.q)
    c1 = c1_constant(consts)
    m2, L_Phi, nu2 = consts.m2, consts.L_Phi, consts.nu2
    inner = (2.0 * m2 * consts.L_E ** 2 / gap ** 2
             + 2.0 * (L_Phi ** 2 + m2) * sigma_k
             + 2.0 * nu2 ** 2 * rho_t * sigma_k)
    outer = 3.0 * (c1 ** 2 * rho_t + L_Phi ** 2 * sigma_k + nu2 ** 2 * rho_t * sigma_k)
    return inner, outer


@dataclass(frozen=True)
class MSEBound:
    total: float
    floor: float
    indicative: bool = False


def mse_bound(consts: ProblemConstants, rho_t: float, sigma_k: float) -> MSEBound:
    """Mean-square-error bound of the SID hypergradient and its ``t, k -> inf`` floor."""
    _nonneg(rho_t=rho_t, sigma_k=sigma_k)
    gap = _gap(consts.q)
    c1 = c1_constant(consts)
    m2 = consts.m2
    floor = 2.0 * m2 * consts.L_E ** 2 / gap ** 2
    total = (floor
             + 6.0 * c1 ** 2 * rho_t
             + 2.0 * (4.0 * consts.L_Phi ** 2 + m2) * sigma_k
             + 8.0 * consts.nu2 ** 2 * rho_t * sigma_k)
    return MSEBound(total, floor, consts.indicative)


def km_constant_envelope(q: float, sigma1: float, eta: float, mse0: float, t) -> float:
    """Mean-square envelope of the constant-step iteration after ``t`` steps."""
    _gap(q)
    _nonneg(sigma1=sigma1, eta=eta, mse0=mse0)
    floor = eta * sigma1 / (1.0 - q * q)
    return (1.0 - eta * (1.0 - q * q)) ** t * (mse0 - floor) + floor


def km_decreasing_c(q: float, sigma1: float, beta: float, gamma: float, mse0: float) -> float:
    """Constant ``c`` of the ``c / (gamma + t)`` decreasing-step envelope."""
    _gap(q)
    _nonneg(sigma1=sigma1, mse0=mse0)
    denom = beta * (1.0 - q * q) - 1.0
    if not denom > 0:
        raise ValueError(f"beta={beta} must exceed 1/(1-q^2)={1 / (1 - q * q):.6g}")
    return max(gamma * mse0, beta ** 2 * sigma1 / denom)


def sgd_rates(L: float, tau: float, sigma1_prime: float, sigma2_prime: float = 0.0,
              eta: float | None = None, beta: float | None = None,
              alpha_choice: str = "1/L") -> dict:
    """Rate constants for SGD seen as a fixed-point iteration.

    Returns ``r1``/``r2`` (constant step ``eta``, when given),
    ``beta_min`` and ``r3`` (decreasing steps, when ``beta`` is given).
    ``alpha_choice`` is ``"1/L"`` or ``"2/(L+tau)"``.
    """
    if not 0.0 < tau <= L:
        raise ValueError(f"need 0 < tau <= L, got tau={tau}, L={L}")
    _nonneg(sigma1_prime=sigma1_prime, sigma2_prime=sigma2_prime)
    out = {}
    if alpha_choice == "1/L":
        out["beta_min"] = L ** 2 / (tau * (2 * L - tau))
        if eta is not None:
            out["r1"] = 1.0 - (eta * tau / L) * (2.0 - tau / L)
            out["r2"] = eta * sigma1_prime / (tau * (2 * L - tau))
        if beta is not None:
            if not beta > out["beta_min"]:
                raise ValueError(f"beta={beta} must exceed {out['beta_min']:.6g}")
            out["r3"] = beta ** 2 * sigma1_prime / (beta * tau * (2 * L - tau) - L ** 2)
    elif alpha_choice == "2/(L+tau)":
        out["beta_min"] = (L + tau) ** 2 / (4 * tau * L)
        if eta is not None:
            out["r1"] = 1.0 - 4.0 * eta * tau * L / (L + tau) ** 2
            out["r2"] = eta * sigma1_prime / (tau * L)
        if beta is not None:
            if not beta > out["beta_min"]:
                raise ValueError(f"beta={beta} must exceed {out['beta_min']:.6g}")
            out["r3"] = 4 * beta ** 2 * sigma1_prime / (4 * beta * tau * L - (L + tau) ** 2)
    else:
        raise ValueError(f"alpha_choice must be '1/L' or '2/(L+tau)', got {alpha_choice!r}")
    return out


def bottou_rates(L: float, tau: float, eta: float, sigma1_prime: float) -> dict:
    """Constant-step SGD rates from the classical analysis with ``alpha = 1/L``."""
    if not 0.0 < tau <= L:
        raise ValueError(f"need 0 < tau <= L, got tau={tau}, L={L}")
    return {"r1": 1.0 - eta * tau / L, "r2": eta * sigma1_prime / (2.0 * tau)}


def subproblem_rate_constants(consts: ProblemConstants, beta: float, gamma: float,
                              w_lambda_norm: float, grad1E_norm: float) -> tuple[float, float, float, float]:
    """``(d_w, d_v, sigma_lam1, sigma_lam2)`` for decreasing steps ``beta/(gamma+i)``.

    ``PowerLaw(d_w, gamma)`` and ``PowerLaw(d_v, gamma)`` then bound the
    mean-square errors of the lower-level and linear-system solvers.
    """
    q = consts.q
    gap = _gap(q)
    s1 = consts.sigma_lam1
    s2 = 2.0 * (consts.L_PhiTilde ** 2 + q ** 2) / gap ** 2
    denom = beta * (1.0 - q * q) - 1.0
    if not denom > 0:
        raise ValueError(f"beta={beta} must exceed 1/(1-q^2)={1 / (1 - q * q):.6g}")
    if gamma < beta * (1.0 + s2) * (1 - 1e-12):
        raise ValueError(f"gamma={gamma:.6g} must be >= beta(1+sigma_lam2)={beta * (1 + s2):.6g}")
    d_w = max(gamma * w_lambda_norm ** 2, beta ** 2 * s1 / denom)
    d_v = grad1E_norm ** 2 / gap ** 2 * max(gamma, 2.0 * beta ** 2 * consts.L_PhiTilde ** 2 / denom)
    return d_w, d_v, s1, s2


def sid_power_law_bound(consts: ProblemConstants, beta: float, gamma: float,
                        w_lambda_norm: float, t: int, k: int) -> MSEBound:
    """MSE bound with both subproblems solved by decreasing steps.

    Composes :func:`subproblem_rate_constants` (using ``L_E`` as the bound
    on ``||grad_1 E||``) with :func:`mse_bound`.
    """
    d_w, d_v, _, _ = subproblem_rate_constants(consts, beta, gamma, w_lambda_norm, consts.L_E)
    rho = RateFunction.power_law(d_w, gamma)
    sig = RateFunction.power_law(d_v, gamma)
    return mse_bound(consts, rho(t), sig(k))
