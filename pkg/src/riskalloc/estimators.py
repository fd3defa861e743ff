"""Online estimators of the noise covariance, the mean-field Jacobian, the
averaged-iterate asymptotic covariance, and the derived confidence intervals.

All accumulators support a leading batch shape so that many independent
replications can be tracked side by side; a single run uses ``batch_shape=()``.
"""
from __future__ import annotations


import numpy as np
from scipy import linalg, special

from .loss import LossSpec, field

COND_LIMIT = 1e8


class SingularJacobianError(np.linalg.LinAlgError):
    """The estimated Jacobian is too ill-conditioned to invert."""

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class CovEstimator:
    """Running ``Sigma_n = (1/n) sum H H^T`` (uncentered, as the estimator is defined).

    The mean field is not subtracted; it vanishes at the root so the bias
    disappears as the iterates converge.
    """

    def __init__(self, dim: int, batch_shape=()):
        self.dim = dim
        self.batch_shape = tuple(batch_shape)
        self.n = 0
        self.sum_outer = np.zeros(self.batch_shape + (dim, dim))

    def update(self, h) -> "CovEstimator":
        h = np.asarray(h, dtype=float)
        self.sum_outer += h[..., :, None] * h[..., None, :]
        self.n += 1
        return self

    def update_many(self, hs) -> "CovEstimator":
        """Add a block of observations stacked along axis 0."""
        hs = np.asarray(hs, dtype=float)
        if len(hs) == 0:
            return self
        flat = hs.reshape(len(hs), -1, self.dim)
        outer = np.einsum("kbi,kbj->bij", flat, flat)
        self.sum_outer += outer.reshape(self.sum_outer.shape)
        self.n += len(hs)
        return self

    @property
    def sigma(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no observations")
        s = self.sum_outer / self.n
        return 0.5 * (s + np.swapaxes(s, -1, -2))

    def copy(self) -> "CovEstimator":
        out = CovEstimator(self.dim, self.batch_shape)
        out.n = self.n
        out.sum_outer = self.sum_outer.copy()
        return out


class JacEstimator:
    """Forward-difference Jacobian ``A_n = (1/(eps n)) sum [H(X_k, Z + eps e_j) - H(X_k, Z)]``.

    The same sample ``X_k`` is used at the base and perturbed points.
    """

    def __init__(self, dim: int, epsilon: float, batch_shape=()):
        if not epsilon > 0:
            raise ValueError("epsilon must be > 0")
        self.dim = dim
        self.epsilon = float(epsilon)
        self.batch_shape = tuple(batch_shape)
        self.n = 0
        self.sum_diff = np.zeros(self.batch_shape + (dim, dim))

    def update(self, loss: LossSpec, x, z, h=None) -> "JacEstimator":
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        return self.update_many(loss, x[None], z[None], None if h is None else np.asarray(h)[None])

    def update_many(self, loss: LossSpec, xs, zs, hs=None) -> "JacEstimator":
        """Add a block of ``(X_k, Z_{k-1})`` pairs stacked along axis 0."""
        xs = np.asarray(xs, dtype=float)
        zs = np.asarray(zs, dtype=float)
        if len(xs) == 0:
            return self
        if hs is None:
            hs = field(loss, xs, zs)
        eps = self.epsilon
        zp = zs.copy()
        for j in range(self.dim):
            zp[..., j] += eps
            diff = field(loss, xs, zp) - hs
            if not np.all(np.isfinite(diff)):
                raise FloatingPointError(f"non-finite perturbed field along coordinate {j}")
            self.sum_diff[..., :, j] += diff.sum(axis=0) / eps
            zp[..., j] = zs[..., j]
        self.n += len(xs)
        return self

    @property
    def jacobian(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no observations")
        return self.sum_diff / self.n

    def copy(self) -> "JacEstimator":
        out = JacEstimator(self.dim, self.epsilon, self.batch_shape)
        out.n = self.n
        out.sum_diff = self.sum_diff.copy()
        return out


def update_cov(state: CovEstimator, h) -> CovEstimator:
    return state.update(h)


def update_jac(state: JacEstimator, loss: LossSpec, x, z) -> JacEstimator:
    return state.update(loss, x, z)


def _as_matrix(obj, attr):
    return getattr(obj, attr) if hasattr(obj, attr) else np.asarray(obj, dtype=float)


def asymptotic_cov(cov, jac, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """``V = A^{-1} Sigma A^{-T}``, symmetrized.

    ``cov`` and ``jac`` are estimator objects or plain (stacks of) matrices.
    Raises :class:`SingularJacobianError` when ``cond(A)`` exceeds ``cond_limit``.
    """
    sigma = _as_matrix(cov, "sigma")
    a = _as_matrix(jac, "jacobian")
    cond = np.linalg.cond(a)
    worst = float(np.max(cond))
    if not worst <= cond_limit:
        raise SingularJacobianError(
            f"Jacobian estimate condition number {worst:.3g} exceeds {cond_limit:.0e}", cond=cond)
    ainv = np.linalg.inv(a)
    v = ainv @ sigma @ np.swapaxes(ainv, -1, -2)
    return 0.5 * (v + np.swapaxes(v, -1, -2))


def normal_quantile(alpha_level: float) -> float:
    """Two-sided standard normal quantile ``q`` with ``P(|N| <= q) = 1 - alpha_level``."""
    if not 0 < alpha_level < 1:
        raise ValueError("alpha_level must lie in (0, 1)")
    return float(special.ndtri(1 - alpha_level / 2))


def ci_half_width(v_diag, n: int, t: float, gamma: float, c: float, scaling: str = "printed"):
    """Half-width factor ``sqrt(V_jj / (t n^gamma))`` or, with ``scaling="step"``,
    ``sqrt(V_jj * gamma_n / t)`` where ``gamma_n = c / n^gamma``."""
    v_diag = np.asarray(v_diag, dtype=float)
    if np.any(v_diag < 0):
        raise ValueError(f"negative diagonal entry in asymptotic covariance: {v_diag.min():.3g}")
    if scaling == "printed":
        return np.sqrt(v_diag / (t * n ** gamma))
    if scaling == "step":
        return np.sqrt(v_diag * c / (t * n ** gamma))
    raise ValueError(f"unknown scaling {scaling!r}")


def confidence_interval(estimate, v, n: int, t: float, gamma: float, c: float = 1.0,
                        alpha_level: float = 0.05, scaling: str = "printed") -> np.ndarray:
    """Per-coordinate interval ``estimate +- q * half_width`` as an array ``(..., dim, 2)``."""
    estimate = np.asarray(estimate, dtype=float)
    v = np.asarray(v, dtype=float)
    half = ci_half_width(np.diagonal(v, axis1=-2, axis2=-1), n, t, gamma, c, scaling)
    q = normal_quantile(alpha_level)
    return np.stack([estimate - q * half, estimate + q * half], axis=-1)


def diagnose_gain(c, a) -> dict:
    """Check the conditions under which the unaveraged iterates are asymptotically normal at rate ``sqrt(n)``.

    ``c`` is the scalar step constant or a gain matrix.  With a scalar the
    report covers both ``cA + I/2`` Hurwitz and ``cI - P`` positive definite,
    ``P`` solving ``A^T P + P A = -I``; with a matrix only the first applies.
    """
    a = np.asarray(a, dtype=float)
    dim = a.shape[0]
    eye = np.eye(dim)
    scalar = np.ndim(c) == 0
    shifted = (c * a if scalar else np.asarray(c, dtype=float) @ a) + eye / 2
    eig = np.linalg.eigvals(shifted)
    report = {
        "shifted_eigenvalues": [complex(e) for e in eig],
        "hurwitz": bool(np.all(eig.real < 0)),
        "a_hurwitz": bool(np.all(np.linalg.eigvals(a).real < 0)),
        "lyapunov_solved": False,
        "lyapunov_p": None,
        "c_minus_p_pd": None,
    }
    if scalar:
        if report["a_hurwitz"]:
            p = linalg.solve_continuous_lyapunov(a.T, -eye)
            p = 0.5 * (p + p.T)
            report["lyapunov_solved"] = bool(np.all(np.isfinite(p)))
            report["lyapunov_p"] = p.tolist()
            report["c_minus_p_pd"] = bool(np.all(np.linalg.eigvalsh(c * eye - p) > 0))
        else:
            report["finding"] = "A is not Hurwitz; Lyapunov equation has no positive definite solution"
        report["passed"] = bool(report["hurwitz"] and report["c_minus_p_pd"])
    else:
        report["passed"] = report["hurwitz"]
    return report


def frobenius_rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


