"""Isotropic affine contraction with additive Gaussian noise."""
from __future__ import annotations

import numpy as np

from ..core import ProblemConstants, SampleKey, StochasticFixedPointProblem, as_realvec


class ToyContraction(StochasticFixedPointProblem):
    """``T(w) = q w + c`` with ``T_hat = T + s * N(0, I)``.

    As a bilevel problem the shift is the hyperparameter,
    ``Phi(w, lam) = q w + lam``, and the upper objective is ``E = ||w||^2 / 2``.
    """

    jacobian_symmetric = True
    separable = True

    def __init__(self, q: float, c, s: float = 0.0):
        if not 0.0 <= q < 1.0:
            raise ValueError(f"q must lie in [0, 1), got {q}")
        if s < 0:
            raise ValueError("noise std must be >= 0")
        self.q = float(q)
        self.c = as_realvec(c, name="shift")
        self.s = float(s)
        self.d = self.m = self.c.shape[0]

    def _lam(self, lam):
        return self.c if lam is None else self.check_lam(lam)

    def _noise(self, w, key: SampleKey):
        if self.s == 0.0:
            return 0.0
        return self.s * key.generator().standard_normal(np.shape(w))

    # plain map view used directly by km_run
    def mean(self, w):
        return self.q * np.asarray(w) + self.c

    def sample(self, w, key: SampleKey):
        return self.mean(w) + self._noise(w, key)

    def phi_mean(self, w, lam=None):
        return self.q * np.asarray(w) + self._lam(lam)

    def phi_sample(self, w, lam, key):
        return self.phi_mean(w, lam) + self._noise(w, key)

    def jvp1_t_mean(self, w, lam, v):
        return self.q * np.asarray(v, dtype=np.float64)

    def jvp1_t_sample(self, w, lam, key, v):
        return self.jvp1_t_mean(w, lam, v)

    def jvp2_t_mean(self, w, lam, v):
        return np.array(v, dtype=np.float64)

    def jvp2_t_sample(self, w, lam, key, v):
        return self.jvp2_t_mean(w, lam, v)

    def upper_value(self, w, lam):
        return 0.5 * np.sum(np.square(w), axis=-1)

    def upper_grad1(self, w, lam):
        return np.array(w, dtype=np.float64)

    def upper_grad2(self, w, lam):
        return np.zeros(np.shape(w)[:-1] + (self.m,))

    def fixed_point(self, lam=None):
        return self._lam(lam) / (1.0 - self.q)

    def exact_hypergrad(self, lam=None):
        return self._lam(lam) / (1.0 - self.q) ** 2

    def constants(self, lam=None) -> ProblemConstants:
        lam = self._lam(lam)
        w_star = self.fixed_point(lam)
        var = self.d * self.s ** 2
        return ProblemConstants(
            q=self.q,
            # local: grad E over the ball of radius ||w*|| around w*
            L_E=2.0 * float(np.linalg.norm(w_star)),
            mu1=1.0, L_Phi=1.0, L_PhiTilde=self.q,
            sigma1_lower=var, sigma_lam1=2.0 * var,
            sigma_lam2=2.0 * (2 * self.q ** 2) / (1.0 - self.q) ** 2,
        )


def toy_contraction(q: float, c, s: float = 0.0) -> ToyContraction:
    return ToyContraction(q, c, s)
