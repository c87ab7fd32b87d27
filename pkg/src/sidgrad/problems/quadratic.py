"""Quadratic lower level with a squared-distance upper objective."""
from __future__ import annotations

import numpy as np

from ..core import ProblemConstants, StochasticFixedPointProblem, as_realvec

NOISE_MODES = ("none", "additive", "lambda_multiplicative")


class QuadraticBilevel(StochasticFixedPointProblem):
    """``l(w, lam) = w'Aw/2 - (B lam)'w`` and ``E(w) = ||w - w_target||^2 / 2``.

    The map is one gradient step ``Phi = w - alpha (A w - B lam)`` with
    ``alpha = 2 / (tau + L)``.  Noise modes:

    * ``"none"``: ``Phi_hat = Phi``;
    * ``"additive"``: ``Phi_hat = Phi + s xi`` with ``xi ~ N(0, I_d)``;
      the Jacobians stay deterministic, so ``m2 = 0``;
    * ``"lambda_multiplicative"``: ``Phi_hat = w - alpha (A w - (1 + s xi) B lam)``
      with scalar ``xi ~ N(0, 1)``; then ``m2 = alpha^2 s^2 ||B||^2``.
    """

    jacobian_symmetric = True

    def __init__(self, A, B=None, w_target=None, noise_mode: str = "none", noise_std: float = 0.0):
        A = np.array(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0:
            raise ValueError(f"A must be positive definite (min eigenvalue {eig[0]:.3g})")
        d = A.shape[0]
        B = np.eye(d) if B is None else np.array(B, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] != d:
            raise ValueError(f"B must have shape ({d}, m)")
        if noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.A, self.B = A, B
        self.d, self.m = d, B.shape[1]
        self.w_target = np.ones(d) if w_target is None else as_realvec(w_target, d, "w_target")
        self.noise_mode = noise_mode
        self.s = float(noise_std) if noise_mode != "none" else 0.0
        self.tau, self.L = float(eig[0]), float(eig[-1])
        self.alpha = 2.0 / (self.tau + self.L)
        self.q = (self.L - self.tau) / (self.L + self.tau)
        self.separable = noise_mode != "lambda_multiplicative" or self.s == 0.0

    def _xi(self, w, key):
        batch = np.shape(w)[:-1]
        gen = key.generator()
        if self.noise_mode == "additive":
            return gen.standard_normal(batch + (self.d,))
        return gen.standard_normal(batch)

    def phi_mean(self, w, lam):
        w = np.asarray(w, dtype=np.float64)
        return w - self.alpha * (w @ self.A - self.B @ lam)

    def phi_sample(self, w, lam, key):
        if self.s == 0.0:
            return self.phi_mean(w, lam)
        xi = self._xi(w, key)
        if self.noise_mode == "additive":
            return self.phi_mean(w, lam) + self.s * xi
        w = np.asarray(w, dtype=np.float64)
        return w - self.alpha * (w @ self.A - (1.0 + self.s * np.asarray(xi))[..., None] * (self.B @ lam))

    def jvp1_t_mean(self, w, lam, v):
        v = np.asarray(v, dtype=np.float64)
        return v - self.alpha * (v @ self.A)

    def jvp1_t_sample(self, w, lam, key, v):
        return self.jvp1_t_mean(w, lam, v)

    def jvp2_t_mean(self, w, lam, v):
        return self.alpha * (np.asarray(v, dtype=np.float64) @ self.B)

    def jvp2_t_sample(self, w, lam, key, v):
        out = self.jvp2_t_mean(w, lam, v)
        if self.noise_mode == "lambda_multiplicative" and self.s > 0.0:
            xi = self._xi(w, key)
            out = (1.0 + self.s * np.asarray(xi))[..., None] * out
        return out

    def upper_value(self, w, lam):
        return 0.5 * np.sum(np.square(np.asarray(w) - self.w_target), axis=-1)

    def upper_grad1(self, w, lam):
        return np.asarray(w, dtype=np.float64) - self.w_target

    def upper_grad2(self, w, lam):
        return np.zeros(np.shape(w)[:-1] + (self.m,))

    def lower_hvp(self, w, lam, v):
        """Hessian of the lower objective applied to ``v``."""
        return np.asarray(v, dtype=np.float64) @ self.A

    def fixed_point(self, lam):
        lam = self.check_lam(lam)
        return np.linalg.solve(self.A, self.B @ lam)

    def exact_hypergrad(self, lam):
        return quadratic_exact_hypergrad(self, lam)

    def constants(self, lam) -> ProblemConstants:
        lam = self.check_lam(lam)
        w_star = self.fixed_point(lam)
        s2 = self.s ** 2
        if self.noise_mode == "additive":
            var, m2 = self.d * s2, 0.0
        else:
            var = self.alpha ** 2 * s2 * float(np.sum((self.B @ lam) ** 2))
            m2 = self.alpha ** 2 * s2 * float(np.linalg.norm(self.B, 2)) ** 2
        return ProblemConstants(
            q=self.q,
            # E is not globally Lipschitz: bound ||grad_1 E|| on the ball of
            # radius ||w(lam)|| about w(lam), which holds the noise-free iterates from 0
            L_E=float(np.linalg.norm(w_star - self.w_target) + np.linalg.norm(w_star)),
            mu1=1.0,
            L_Phi=self.alpha * float(np.linalg.norm(self.B, 2)),
            L_PhiTilde=self.q,
            m2=m2,
            sigma1_lower=var,
            sigma_lam1=2.0 * var,
            sigma_lam2=4.0 * self.q ** 2 / (1.0 - self.q) ** 2,
        )


def quadratic_bilevel(A=None, B=None, w_target=None, noise_mode="none", noise_std=0.0) -> QuadraticBilevel:
    """Build a quadratic problem; defaults to ``A = diag(2, 4)``, ``B = I``, ``w_target = (1, 1)``."""
    if A is None:
        A = np.diag([2.0, 4.0])
    return QuadraticBilevel(A, B, w_target, noise_mode, noise_std)


def quadratic_exact_hypergrad(problem: QuadraticBilevel, lam) -> np.ndarray:
    """``B' A^{-1} (A^{-1} B lam - w_target)``."""
    if not isinstance(problem, QuadraticBilevel):
        raise TypeError("quadratic_exact_hypergrad needs a QuadraticBilevel")
    w = problem.fixed_point(lam)
    return problem.B.T @ np.linalg.solve(problem.A, w - problem.w_target)
