"""Reference solutions.

Closed forms for the exponential loss with Gaussian losses, and a sample
average approximation (SAA) root finder usable with any loss and sampler.

For ``l`` exponential and ``X ~ N(mu, M)`` every component of ``H(X, z)`` is
an affine combination of the lognormal variables ``exp(beta w.(X - m))``
with ``w`` ranging over the unit vectors and the all-ones vector, so the
mean field, its Jacobian and the noise covariance follow from
``E exp(beta w.(X - m)) = exp(beta w.(mu - m) + beta^2 w'Mw / 2)``.

The multiplier at the optimum is not printed alongside the allocation
formula; it comes from the first-order condition
``1 = lambda* / (1 + alpha) * E[beta exp(beta (X_i - m_i*)) + alpha beta exp(beta (X_1 + X_2 - m_1* - m_2*))]``
which, with ``Q = exp(beta^2 sigma_i^2 / 2 - beta m_i*)`` (equal for both
components at the optimum), reads ``lambda* = (1 + alpha) / (beta (Q + alpha exp(rho beta^2 sigma_1 sigma_2) Q^2))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .loss import LossKind, LossSpec, field
from .samplers import GaussianSpec, make_rng


class SAAConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExpGaussParams:
    sigma1: float = 1.0
    sigma2: float = 1.0
    rho: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("volatilities must be > 0")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")

    @property
    def cov(self) -> np.ndarray:
        c = self.rho * self.sigma1 * self.sigma2
        return np.array([[self.sigma1 ** 2, c], [c, self.sigma2 ** 2]])

    def loss(self) -> LossSpec:
        return LossSpec(LossKind.EXPONENTIAL, 2, self.alpha, self.beta)

    def sampler(self) -> GaussianSpec:
        return GaussianSpec(self.cov)


def src(p: ExpGaussParams, with_flag: bool = False):
    """Systemic risk contribution; 0 at ``alpha = 0`` (flagged as the limit value)."""
    if p.alpha == 0:
        return (0.0, True) if with_flag else 0.0
    e = math.exp(p.rho * p.beta ** 2 * p.sigma1 * p.sigma2)
    a = p.alpha
    val = math.log(a * e / (-1 + math.sqrt(1 + a * (a + 2) * e)))
    return (val, False) if with_flag else val


def exact_allocation(p: ExpGaussParams) -> np.ndarray:
    """``(m_1*, m_2*, lambda*)`` in closed form."""
    b = p.beta
    s = src(p)
    m = np.array([b * p.sigma1 ** 2 / 2, b * p.sigma2 ** 2 / 2]) + s / b
    q = math.exp(b ** 2 * p.sigma1 ** 2 / 2 - b * m[0])
    e = math.exp(p.rho * b ** 2 * p.sigma1 * p.sigma2)
    lam = (1 + p.alpha) / (b * (q + p.alpha * e * q * q))
    return np.array([m[0], m[1], lam])


class ExpGaussModel:
    """Analytic moments of ``H(X, z)`` for the exponential loss and Gaussian ``X``."""

    def __init__(self, loss: LossSpec, cov, mean=None):
        if loss.kind is not LossKind.EXPONENTIAL:
            raise ValueError("closed-form moments need the exponential loss")
        self.loss = loss
        self.cov = np.asarray(cov, dtype=float)
        d = loss.d
        self.mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
        # rows: unit vectors then the all-ones vector
        self.w = np.vstack([np.eye(d), np.ones(d)])

    @classmethod
    def from_params(cls, p: ExpGaussParams) -> "ExpGaussModel":
        return cls(p.loss(), p.cov)

    def _coef(self, lam):
        d, a, b = self.loss.d, self.loss.alpha, self.loss.beta
        coef = np.zeros((d + 1, d + 1))
        coef[:d, :d] = np.eye(d) * lam * b / (1 + a)
        coef[:d, d] = a * lam * b / (1 + a)
        coef[d, :d] = 1 / (1 + a)
        coef[d, d] = a / (1 + a)
        const = np.r_[-np.ones(d), -(a + d) / (a + 1)]
        return coef, const

    def _exp_moment(self, w, m):
        b = self.loss.beta
        return np.exp(b * w @ (self.mean - m) + 0.5 * b * b * np.einsum("...i,ij,...j->...", w, self.cov, w))

    def mean_field(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        coef, const = self._coef(z[-1])
        return const + coef @ self._exp_moment(self.w, z[:-1])

    def jacobian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        d, b = self.loss.d, self.loss.beta
        m, lam = z[:-1], z[-1]
        mu = self._exp_moment(self.w, m)
        coef, _ = self._coef(lam)
        jac = np.empty((d + 1, d + 1))
        jac[:, :d] = coef @ (-b * self.w * mu[:, None])
        dcoef = np.zeros_like(coef)
        dcoef[:d] = coef[:d] / lam if lam != 0 else self._coef(1.0)[0][:d]
        jac[:, d] = dcoef @ mu
        return jac

    def noise_cov(self, z) -> np.ndarray:
        """``Cov(H(X, z))``."""
        z = np.asarray(z, dtype=float)
        m = z[:-1]
        coef, _ = self._coef(z[-1])
        mu = self._exp_moment(self.w, m)
        pair = self._exp_moment(self.w[:, None, :] + self.w[None, :, :], m)
        return coef @ (pair - np.outer(mu, mu)) @ coef.T

    def second_moment(self, z) -> np.ndarray:
        """``E[H H^T]`` at ``z``."""
        h = self.mean_field(z)
        return self.noise_cov(z) + np.outer(h, h)


def _fd_jacobian(fun, u, r0, step):
    jac = np.empty((r0.size, u.size))
    for j in range(u.size):
        du = step * (1.0 + abs(u[j]))
        up = u.copy()
        up[j] += du
        jac[:, j] = (fun(up) - r0) / du
    return jac


def saa_root(loss: LossSpec, sampler, n_samples: int = 1_000_000, z_init=None,
             tol: float = 1e-6, seed: int = 0, max_iter: int = 200,
             samples: np.ndarray | None = None, fd_step: float = 1e-6) -> np.ndarray:
    """Root of the sample-average field ``(1/N) sum_k H(x_k, z)`` over one frozen sample.

    Damped Newton on ``(m, log lambda)`` with a forward-difference Jacobian
    and step halving on the residual norm (smallest step 1e-6).
    """
    if samples is None:
        samples = sampler.sample(make_rng(seed), int(n_samples))
    x = np.asarray(samples, dtype=float)
    d = loss.d
    if z_init is None:
        z_init = np.r_[np.zeros(d), 1.0]
    z_init = np.asarray(z_init, dtype=float)
    if not z_init[-1] > 0:
        raise ValueError("initial multiplier must be > 0")

    def residual(u):
        z = np.r_[u[:d], math.exp(u[d])]
        return field(loss, x, z).mean(axis=0)

    u = np.r_[z_init[:d], math.log(z_init[-1])]
    r = residual(u)
    norm = np.linalg.norm(r)
    for _ in range(max_iter):
        if norm <= tol:
            break
        jac = _fd_jacobian(residual, u, r, fd_step)
        try:
            delta = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -r, rcond=None)[0]
        t = 1.0
        while True:
            cand = u + t * delta
            try:
                rc = residual(cand)
                nc = np.linalg.norm(rc)
            except (FloatingPointError, OverflowError):
                nc = np.inf
            if nc < norm or t <= 1e-6:
                break
            t /= 2
        if not nc < norm:
            # the floor step did not help: the residual cannot be reduced further
            break
        u, r, norm = cand, rc, nc
        if u[d] < -700:
            raise SAAConvergenceError("multiplier collapsed to 0")
    if norm > tol:
        raise SAAConvergenceError(f"no convergence to {tol:g} (residual {norm:.3g})")
    return np.r_[u[:d], math.exp(u[d])]
