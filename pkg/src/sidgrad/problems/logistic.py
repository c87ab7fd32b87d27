"""Regularized logistic regression (binary and multinomial) as bilevel problems.

The lower objective is a *sum* over training points plus a ridge term
``R(w, lam)``; the map is one gradient step with step ``alpha = 2/(L + tau)``.
Minibatch samples rescale the data term by ``n / b`` so that their mean is
the full map.  The upper objective is the summed loss on a validation set.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from ..core import ProblemConstants, SampleKey, StochasticFixedPointProblem, as_realvec
from ..data import MinibatchSampler

REG_MODES = ("single", "per_feature")
# sup |psi'''| of the logistic loss, attained at u = log(2 +- sqrt 3)
_PSI3_MAX = 1.0 / (6.0 * math.sqrt(3.0))


def top_eigenvalue(M: np.ndarray, n_iters: int = 1000, tol: float = 1e-14, seed: int = 0) -> float:
    """Largest eigenvalue of ``M' M`` for a data matrix ``M``, by power iteration."""
    if not np.any(M):
        return 0.0
    u = SampleKey(seed, 0, 0).generator().standard_normal(M.shape[1])
    u /= np.linalg.norm(u)
    est = 0.0
    for _ in range(n_iters):
        g = M.T @ (M @ u)
        nrm = float(np.linalg.norm(g))
        if nrm == 0.0:
            return 0.0
        u = g / nrm
        if abs(nrm - est) <= tol * nrm:
            return nrm
        est = nrm
    return est


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    # exp(-logaddexp(0, -z)) is 1/(1+e^-z) without overflow
    return np.exp(-np.logaddexp(0.0, -z))


class _RegularizedERM(StochasticFixedPointProblem):
    jacobian_symmetric = True
    separable = True
    p: int  # parameter dimension

    def _setup(self, X, reg_mode, batch_size, X_val, sampling, seed):
        if reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}")
        X = np.array(X, dtype=np.float64)
        if X.ndim != 2 or not np.all(np.isfinite(X)):
            raise ValueError("X must be a finite 2-D matrix")
        self.X = X
        self.n, self.n_features = X.shape
        self.reg_mode = reg_mode
        self.X_val = X if X_val is None else np.array(X_val, dtype=np.float64)
        b = self.n if batch_size is None else int(batch_size)
        self.sampler = MinibatchSampler(self.n, b, sampling, seed)
        self.n_samples, self.batch_size = self.n, b
        self.m = 1 if reg_mode == "single" else self.n_features
        self.d = self.p
        self._sq_norms = np.einsum("ij,ij->i", X, X)
        self._cache = {}

    # -- hyperparameter-dependent scalars
    def _reg_diag(self, lam):
        """Per-coordinate ridge weights over the flattened parameter."""
        lam = np.asarray(lam, dtype=np.float64)
        if self.reg_mode == "single":
            return np.full(self.p, lam[0])
        return np.tile(lam, self.p // self.n_features)

    def step_constants(self, lam):
        """``(L, tau, alpha, q)`` of the lower objective at ``lam``."""
        lam = self.check_lam(lam)
        if np.any(lam <= 0):
            raise ValueError("regularization parameters must be positive")
        tau, lam_max = float(lam.min()), float(lam.max())
        L = lam_max + self.data_lipschitz
        alpha = 2.0 / (L + tau)
        return L, tau, alpha, (L - tau) / (L + tau)

    def _alpha(self, lam):
        key = np.asarray(lam, dtype=np.float64).tobytes()
        if key not in self._cache:
            self._cache = {key: self.step_constants(lam)[2]}
        return self._cache[key]

    def _reg_grad(self, w, lam):
        return np.asarray(w) * self._reg_diag(lam)

    def _idx(self, key, batch_shape):
        return self.sampler.indices(key, batch_shape)

    # -- lower level
    def lower_value(self, w, lam):
        w = np.asarray(w, dtype=np.float64)
        return self.data_loss(w) + 0.5 * np.sum(self._reg_diag(lam) * w * w, axis=-1)

    def lower_grad(self, w, lam, idx=None):
        return self.data_grad(w, idx) + self._reg_grad(w, lam)

    def lower_hvp(self, w, lam, v, idx=None):
        return self.data_hvp(w, v, idx) + np.asarray(v) * self._reg_diag(lam)

    def phi_at_indices(self, w, lam, idx):
        w = np.asarray(w, dtype=np.float64)
        return w - self._alpha(lam) * self.lower_grad(w, lam, idx)

    def phi_mean(self, w, lam):
        return self.phi_at_indices(w, lam, None)

    def phi_sample(self, w, lam, key):
        return self.phi_at_indices(w, lam, self._idx(key, np.shape(w)[:-1]))

    def _jvp1(self, w, lam, v, idx):
        v = np.asarray(v, dtype=np.float64)
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), np.broadcast_shapes(np.shape(w), v.shape))
        return v - self._alpha(lam) * self.lower_hvp(w, lam, v, idx)

    def jvp1_t_mean(self, w, lam, v):
        return self._jvp1(w, lam, v, None)

    def jvp1_t_sample(self, w, lam, key, v):
        shape = np.broadcast_shapes(np.shape(w), np.shape(v))[:-1]
        return self._jvp1(w, lam, v, self._idx(key, shape))

    def jvp2_t_mean(self, w, lam, v):
        # d2 Phi = -alpha d_lam grad R; alpha's own lam-dependence multiplies
        # grad l, which vanishes at the fixed point, so it is dropped
        prod = -self._alpha(lam) * np.asarray(w) * np.asarray(v)
        if self.reg_mode == "single":
            return prod.sum(axis=-1, keepdims=True)
        return prod.reshape(prod.shape[:-1] + (-1, self.n_features)).sum(axis=-2)

    def jvp2_t_sample(self, w, lam, key, v):
        return self.jvp2_t_mean(w, lam, v)

    # -- upper level
    def upper_value(self, w, lam):
        return self.val_loss(w)

    def upper_grad1(self, w, lam):
        return self.val_grad(w)

    def upper_grad2(self, w, lam):
        return np.zeros(np.shape(w)[:-1] + (self.m,))

    # -- oracles
    def fixed_point(self, lam, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
        """Lower-level minimizer by damped Newton (dense or CG inner solves).

        Stops when ``||Phi(w) - w|| = alpha ||grad l(w)||`` is below ``tol``.
        """
        lam = self.check_lam(lam)
        key = ("fp", np.asarray(lam).tobytes(), tol)
        cached = self._fp_cache.get(key) if hasattr(self, "_fp_cache") else None
        if cached is not None:
            return cached.copy()
        alpha = self._alpha(lam)
        w = np.zeros(self.p)
        f = self.lower_value(w, lam)
        for _ in range(max_iter):
            g = self.lower_grad(w, lam)
            if alpha * np.linalg.norm(g) <= tol:
                break
            if self.p <= 1500:
                H = np.column_stack([self.lower_hvp(w, lam, e) for e in np.eye(self.p)])
                step = np.linalg.solve(0.5 * (H + H.T), g)
            else:
                op = LinearOperator((self.p, self.p), matvec=lambda u: self.lower_hvp(w, lam, u),
                                    dtype=np.float64)
                step, _ = cg(op, g, rtol=1e-12, maxiter=10 * self.p)
            t = 1.0
            while True:
                w_new = w - t * step
                f_new = self.lower_value(w_new, lam)
                if f_new <= f - 1e-4 * t * float(g @ step) or t < 1e-10:
                    break
                t *= 0.5
            if t < 1e-10 and f_new >= f:
                break  # converged to rounding level
            w, f = w_new, f_new
        if not hasattr(self, "_fp_cache"):
            self._fp_cache = {}
        self._fp_cache = {key: w.copy()}
        return w

    def constants(self, lam) -> ProblemConstants:
        lam = self.check_lam(lam)
        L, tau, alpha, q = self.step_constants(lam)
        w_star = self.fixed_point(lam)
        lam_max = float(lam.max())
        hess_bound = self._sample_curvature * self.n * float(self._sq_norms.max()) + lam_max
        L_tilde = max(abs(1.0 - alpha * tau), abs(alpha * hess_bound - 1.0))
        g = self._per_example_grads(w_star)
        var_star = self.n ** 2 / self.batch_size * float(
            np.mean(np.sum(g * g, axis=1)) - np.sum(g.mean(axis=0) ** 2))
        val_norms = np.sqrt(np.einsum("ij,ij->i", self.X_val, self.X_val))
        return ProblemConstants(
            q=q,
            L_E=self._grad_bound * float(val_norms.sum()),
            nu1=alpha * self._hess_lipschitz * float(np.sum(np.sqrt(self._sq_norms) ** 3)),
            nu2=alpha,
            mu1=self._sample_curvature * top_eigenvalue(self.X_val),
            mu2=0.0,
            L_Phi=alpha * self._lam_jacobian_norm(w_star),
            L_PhiTilde=L_tilde,
            m2=0.0,
            sigma1_lower=alpha ** 2 * self.n ** 2 / self.batch_size
            * self._grad_bound ** 2 * float(self._sq_norms.mean()),
            sigma2_lower=0.0,
            sigma_lam1=2.0 * alpha ** 2 * max(var_star, 0.0),
            sigma_lam2=2.0 * (L_tilde ** 2 + q ** 2) / (1.0 - q) ** 2,
        )


class RegLogistic(_RegularizedERM):
    """Binary logistic regression, labels in {-1, +1}, ``psi(u) = log(1 + e^-u)``."""

    _sample_curvature = 0.25   # sup psi''
    _grad_bound = 1.0          # sup |psi'|
    _hess_lipschitz = _PSI3_MAX

    def __init__(self, X, y, reg_mode="single", batch_size=None, X_val=None, y_val=None,
                 sampling="iid_with_replacement", seed=0):
        X = np.asarray(X, dtype=np.float64)
        self.p = X.shape[1]
        self._setup(X, reg_mode, batch_size, X_val, sampling, seed)
        self.y = self._check_labels(y, self.n)
        self.y_val = self.y if y_val is None else self._check_labels(y_val, self.X_val.shape[0])
        self.data_lipschitz = 0.25 * top_eigenvalue(self.X)

    @staticmethod
    def _check_labels(y, n):
        y = np.asarray(y)
        if y.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {y.shape}")
        if not np.all((y == 1) | (y == -1)):
            raise ValueError("labels must be in {-1, +1}")
        return y.astype(np.float64)

    def _rows(self, idx):
        if idx is None:
            return self.X, self.y, 1.0
        return self.X[idx], self.y[idx], self.n / idx.shape[-1]

    def _margins(self, Xb, yb, w):
        return yb * (Xb @ np.asarray(w)[..., None])[..., 0]

    def data_loss(self, w, idx=None):
        Xb, yb, scale = self._rows(idx)
        return scale * _log1pexp(-self._margins(Xb, yb, w)).sum(axis=-1)

    def data_grad(self, w, idx=None):
        Xb, yb, scale = self._rows(idx)
        coef = -yb * _sigmoid(-self._margins(Xb, yb, w))
        return scale * (coef[..., None, :] @ Xb)[..., 0, :]

    def data_hvp(self, w, v, idx=None):
        Xb, yb, scale = self._rows(idx)
        s = _sigmoid(self._margins(Xb, yb, w))
        coef = s * (1.0 - s) * (Xb @ np.asarray(v)[..., None])[..., 0]
        return scale * (coef[..., None, :] @ Xb)[..., 0, :]

    def _per_example_grads(self, w):
        return (-self.y * _sigmoid(-self.y * (self.X @ w)))[:, None] * self.X

    def _lam_jacobian_norm(self, w):
        return float(np.linalg.norm(w)) if self.reg_mode == "single" else float(np.abs(w).max())

    def val_loss(self, w):
        return _log1pexp(-self._margins(self.X_val, self.y_val, w)).sum(axis=-1)

    def val_grad(self, w):
        coef = -self.y_val * _sigmoid(-self._margins(self.X_val, self.y_val, w))
        return (coef[..., None, :] @ self.X_val)[..., 0, :]

    def predict(self, w, X):
        return X @ np.asarray(w)


class MultinomialLogistic(_RegularizedERM):
    """Softmax regression with ``W`` of shape ``(c, d)`` flattened row-major.

    ``per_feature`` regularization weights column ``j`` of ``W`` by ``lam_j``.
    """

    _sample_curvature = 0.5        # ||diag(p) - p p'|| <= 1/2
    _grad_bound = math.sqrt(2.0)   # ||p - e_y|| <= sqrt 2
    _hess_lipschitz = 1.5

    def __init__(self, X, labels, n_classes, reg_mode="single", batch_size=None, X_val=None,
                 labels_val=None, sampling="iid_with_replacement", seed=0):
        X = np.asarray(X, dtype=np.float64)
        self.c = int(n_classes)
        if self.c < 2:
            raise ValueError("need at least two classes")
        self.p = self.c * X.shape[1]
        self._setup(X, reg_mode, batch_size, X_val, sampling, seed)
        self.labels = self._check_labels(labels, self.n)
        self.labels_val = self.labels if labels_val is None else self._check_labels(
            labels_val, self.X_val.shape[0])
        self.data_lipschitz = 0.5 * top_eigenvalue(self.X)

    def _check_labels(self, labels, n):
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.c
                            or not np.all(labels == np.rint(labels))):
            raise ValueError(f"labels must be integers in 0..{self.c - 1}")
        return labels.astype(np.int64)

    def _W(self, w):
        w = np.asarray(w, dtype=np.float64)
        return w.reshape(w.shape[:-1] + (self.c, self.n_features))

    def _rows(self, idx, val=False):
        if val:
            return self.X_val, self.labels_val, 1.0
        if idx is None:
            return self.X, self.labels, 1.0
        return self.X[idx], self.labels[idx], self.n / idx.shape[-1]

    def _probs(self, Xb, W):
        Z = Xb @ np.swapaxes(W, -1, -2)
        Z = Z - Z.max(axis=-1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=-1, keepdims=True)
        return Z, P

    def _loss(self, w, idx, val=False):
        Xb, yb, scale = self._rows(idx, val)
        Z, P = self._probs(Xb, self._W(w))
        lse = np.log(np.exp(Z).sum(axis=-1))
        picked = np.take_along_axis(Z, np.broadcast_to(yb, Z.shape[:-1])[..., None], axis=-1)[..., 0]
        return scale * (lse - picked).sum(axis=-1)

    def _grad(self, w, idx, val=False):
        Xb, yb, scale = self._rows(idx, val)
        _, P = self._probs(Xb, self._W(w))
        R = P.copy()
        yb = np.broadcast_to(yb, P.shape[:-1])
        np.put_along_axis(R, yb[..., None], np.take_along_axis(P, yb[..., None], -1) - 1.0, axis=-1)
        G = np.swapaxes(R, -1, -2) @ Xb
        return scale * G.reshape(G.shape[:-2] + (self.p,))

    def data_loss(self, w, idx=None):
        return self._loss(w, idx)

    def data_grad(self, w, idx=None):
        return self._grad(w, idx)

    def data_hvp(self, w, v, idx=None):
        Xb, _, scale = self._rows(idx)
        _, P = self._probs(Xb, self._W(w))
        U = Xb @ np.swapaxes(self._W(v), -1, -2)
        PU = P * U
        R = PU - P * PU.sum(axis=-1, keepdims=True)
        G = np.swapaxes(R, -1, -2) @ Xb
        return scale * G.reshape(G.shape[:-2] + (self.p,))

    def _per_example_grads(self, w):
        _, P = self._probs(self.X, self._W(w))
        P[np.arange(self.n), self.labels] -= 1.0
        return (P[:, :, None] * self.X[:, None, :]).reshape(self.n, self.p)

    def _lam_jacobian_norm(self, w):
        W = self._W(w)
        if self.reg_mode == "single":
            return float(np.linalg.norm(W))
        return float(np.sqrt((W * W).sum(axis=0)).max())

    def val_loss(self, w):
        return self._loss(w, None, val=True)

    def val_grad(self, w):
        return self._grad(w, None, val=True)

    def predict(self, w, X):
        return X @ self._W(w).T


def logistic_problem(X, y, reg_mode="single", batch_size=None, X_val=None, y_val=None,
                     sampling="iid_with_replacement") -> RegLogistic:
    return RegLogistic(X, y, reg_mode, batch_size, X_val, y_val, sampling)


def logistic_constants(problem: _RegularizedERM, lam) -> tuple[float, float, float, float]:
    """``(L, tau, alpha, q)``: smoothness, strong convexity, step ``2/(L+tau)`` and modulus."""
    return problem.step_constants(lam)


def multinomial_problem(X, labels, n_classes, reg_mode="single", batch_size=None, X_val=None,
                        labels_val=None, sampling="iid_with_replacement") -> MultinomialLogistic:
    return MultinomialLogistic(X, labels, n_classes, reg_mode, batch_size, X_val, labels_val, sampling)
