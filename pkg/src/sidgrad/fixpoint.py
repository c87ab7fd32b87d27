"""Stochastic Krasnoselskii-Mann iteration and its step-size rules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NonFiniteError, SampleKey, Stream

__all__ = [
    "StepSchedule",
    "Trajectory",
    "DivergenceError",
    "km_run",
    "schedule_constant",
    "schedule_decreasing",
    "schedule_two_phase",
    "lipschitz_to_variance",
    "DIVERGENCE_NORM",
]

DIVERGENCE_NORM = 1e12


class DivergenceError(NonFiniteError):
    """Iterate became non-finite or exceeded :data:`DIVERGENCE_NORM`."""

    def __init__(self, message, iteration):
        super().__init__(message, iteration)
        self.iteration = iteration


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``eta_t`` of the relaxed iteration.

    ``kind`` is ``"constant"`` (``eta``), ``"decreasing"``
    (``beta / (gamma + t)``) or ``"two_phase"`` (``eta`` for
    ``t < switch_iter``, then ``beta / (gamma + t - switch_iter)``).
    """

    kind: str
    eta: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    switch_iter: int = 0
    note: str = ""

    def __post_init__(self):
        if self.kind not in ("constant", "decreasing", "two_phase"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("constant", "two_phase") and not self.eta >= 0.0:
            raise ValueError("eta must be >= 0")
        if self.kind in ("decreasing", "two_phase"):
            if not (self.beta > 0.0 and self.gamma > 0.0):
                raise ValueError("decreasing steps need beta > 0 and gamma > 0")
        if self.switch_iter < 0:
            raise ValueError("switch_iter must be >= 0")

    @classmethod
    def constant(cls, eta: float) -> "StepSchedule":
        return cls("constant", eta=float(eta))

    @classmethod
    def decreasing(cls, beta: float, gamma: float) -> "StepSchedule":
        return cls("decreasing", beta=float(beta), gamma=float(gamma))

    def value_at(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta
        if self.kind == "decreasing":
            return self.beta / (self.gamma + t)
        if t < self.switch_iter:
            return self.eta
        return self.beta / (self.gamma + (t - self.switch_iter))

    def values(self, steps: int) -> np.ndarray:
        t = np.arange(steps, dtype=np.float64)
        if self.kind == "constant":
            return np.full(steps, self.eta)
        if self.kind == "decreasing":
            return self.beta / (self.gamma + t)
        return np.where(t < self.switch_iter, self.eta,
                        self.beta / (self.gamma + np.maximum(t - self.switch_iter, 0.0)))

    def max_value(self) -> float:
        if self.kind == "constant":
            return self.eta
        if self.kind == "decreasing":
            return self.beta / self.gamma
        return max(self.eta, self.beta / self.gamma)

    def check_admissible(self, q: float | None = None, sigma2: float | None = None) -> None:
        """Raise ``ValueError`` if the schedule violates the rate conditions."""
        if sigma2 is not None and self.max_value() > 1.0 / (1.0 + sigma2) * (1 + 1e-12):
            raise ValueError(
                f"step size {self.max_value():.6g} exceeds 1/(1+sigma2) = {1 / (1 + sigma2):.6g}")
        if self.kind != "constant" and q is not None:
            if not self.beta > 1.0 / (1.0 - q * q):
                raise ValueError(f"beta={self.beta:.6g} must exceed 1/(1-q^2)={1 / (1 - q * q):.6g}")
            if sigma2 is not None and self.gamma < self.beta * (1.0 + sigma2) * (1 - 1e-12):
                raise ValueError(f"gamma={self.gamma:.6g} must be >= beta(1+sigma2)")


@dataclass
class Trajectory:
    checkpoints: list = field(default_factory=list)  # [(t, iterate)]
    final: np.ndarray | None = None
    sample_count: int = 0

    @property
    def steps(self) -> int:
        return self.checkpoints[-1][0] if self.checkpoints else 0


SampleMap = Callable[[np.ndarray, SampleKey], np.ndarray]


def km_run(sample_map: SampleMap, w0, schedule: StepSchedule, steps: int, stream: Stream,
           record_every: int = 0, q: float | None = None, sigma2: float | None = None) -> Trajectory:
    """Run ``w <- w + eta_t (T_hat(w, zeta_t) - w)`` for ``steps`` iterations.

    ``zeta_t`` is the key ``stream.key(t)``; exactly ``steps`` keys are
    consumed.  ``record_every=0`` keeps only the initial and final iterate.
    When ``q``/``sigma2`` are given the schedule is checked against them.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if q is not None or sigma2 is not None:
        schedule.check_admissible(q, sigma2)
    w = np.array(w0, dtype=np.float64, copy=True)
    etas = schedule.values(steps)
    traj = Trajectory(checkpoints=[(0, w.copy())])
    for t in range(steps):
        eta = etas[t]
        tw = sample_map(w, stream.key(t))
        if eta == 1.0:
            w = np.array(tw, dtype=np.float64)
        else:
            w = w + eta * (tw - w)
        nrm = np.max(np.abs(w)) if w.size else 0.0
        if not np.isfinite(nrm) or nrm > DIVERGENCE_NORM:
            raise DivergenceError(f"iterate diverged at iteration {t + 1}", t + 1)
        if record_every and (t + 1) % record_every == 0 and t + 1 < steps:
            traj.checkpoints.append((t + 1, w.copy()))
    if steps > 0:
        traj.checkpoints.append((steps, w.copy()))
    traj.final = w
    traj.sample_count = steps
    return traj


def schedule_constant(sigma2: float = 0.0, eta_override: float | None = None) -> StepSchedule:
    """Largest admissible constant step ``1/(1+sigma2)``, or a checked override."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    cap = 1.0 / (1.0 + sigma2)
    if eta_override is None:
        return StepSchedule.constant(cap)
    if not 0.0 < eta_override <= cap:
        raise ValueError(f"inadmissible constant step {eta_override}: need 0 < eta <= {cap:.6g}")
    return StepSchedule.constant(eta_override)


def schedule_decreasing(q: float, sigma2: float = 0.0, beta: float | None = None,
                        gamma: float | None = None) -> StepSchedule:
    """``eta_t = beta / (gamma + t)`` with ``beta = 2/(1-q^2)``, ``gamma = beta(1+sigma2)`` by default."""
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    beta = 2.0 / (1.0 - q * q) if beta is None else float(beta)
    gamma = beta * (1.0 + sigma2) if gamma is None else float(gamma)
    if not beta > 1.0 / (1.0 - q * q):
        raise ValueError(f"beta={beta:.6g} must exceed 1/(1-q^2)={1 / (1 - q * q):.6g}")
    if gamma < beta * (1.0 + sigma2):
        raise ValueError(f"gamma={gamma:.6g} must be >= beta(1+sigma2)={beta * (1 + sigma2):.6g}")
    return StepSchedule.decreasing(beta, gamma)


def schedule_two_phase(q: float, sigma1: float, sigma2: float, mse0_estimate: float) -> StepSchedule:
    """Constant ``1/(1+sigma2)`` until the constant-step envelope is within a
    factor two of its floor, then the default decreasing rule re-indexed
    from the switch.

    The factor two is where ``gamma * MSE`` stops dominating the second term
    of the decreasing-step constant for ``beta = 2/(1-q^2)``.
    """
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    if min(sigma1, sigma2, mse0_estimate) < 0:
        raise ValueError("constants must be >= 0")
    eta = 1.0 / (1.0 + sigma2)
    if sigma1 == 0.0:
        return StepSchedule("constant", eta=eta, note="sigma1 = 0: no noise floor, constant steps throughout")
    floor = eta * sigma1 / (1.0 - q * q)
    rate = 1.0 - eta * (1.0 - q * q)
    excess = mse0_estimate - floor
    if excess <= floor:
        switch = 0
    elif rate <= 0.0:
        switch = 1
    else:
        switch = max(0, math.ceil(math.log(floor / excess) / math.log(rate)))
        # guard the closed form against rounding at the boundary
        while switch > 0 and rate ** (switch - 1) * excess <= floor:
            switch -= 1
        while rate ** switch * excess > floor:
            switch += 1
    beta = 2.0 / (1.0 - q * q)
    return StepSchedule("two_phase", eta=eta, beta=beta, gamma=beta * (1.0 + sigma2), switch_iter=switch)


def lipschitz_to_variance(L_hatT: float, q: float, var_at_fixed_point: float) -> tuple[float, float]:
    """Variance-model constants ``(sigma1, sigma2)`` of a map whose samples are
    ``L_hatT``-Lipschitz: ``sigma1 = 2 Var[T_hat(w*)]``,
    ``sigma2 = 2 (L_hatT^2 + q^2) / (1 - q)^2``."""
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    if L_hatT < 0 or var_at_fixed_point < 0:
        raise ValueError("inputs must be >= 0")
    return 2.0 * var_at_fixed_point, 2.0 * (L_hatT ** 2 + q ** 2) / (1.0 - q) ** 2
