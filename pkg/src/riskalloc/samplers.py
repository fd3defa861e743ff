"""Scenario generators for the loss vector ``X``.

Two families are provided: a correlated Gaussian vector and a compound
Poisson vector whose counts are coupled through a Gaussian copula.  For the
latter, the Gaussian correlations are calibrated so that the *counts* reach a
prescribed correlation matrix.

Every sampler exposes ``d`` and ``sample(rng, size) -> (size, d)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import optimize, special, stats

RHO_BRACKET = 0.999
TAIL_MASS = 1e-12
MAX_TRUNC = 200


class InfeasibleCorrelationError(ValueError):
    """Target count correlation outside the range reachable by the copula."""

    def __init__(self, message, bracket=None, pair=None):
        super().__init__(message)
        self.bracket = bracket
        self.pair = pair


class CalibrationError(ValueError):
    """Calibrated Gaussian correlation matrix is not positive semi-definite."""

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = list(pairs)


def make_rng(seed: int, rep: int | None = None) -> np.random.Generator:
    """Random stream for a run.

    ``rep=None`` is the stream of a single run seeded with ``seed``; an
    integer ``rep`` selects the independent child stream of replication
    ``rep`` (``SeedSequence(seed, spawn_key=(rep,))``).
    """
    if rep is None:
        return np.random.default_rng(np.random.SeedSequence(int(seed)))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(rep),)))


def covariance_factor(cov, tol: float = 1e-10) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == cov``; falls back to an eigen factor when singular."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise ValueError("covariance matrix is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -tol * scale:
        raise np.linalg.LinAlgError(
            f"covariance matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return v * np.sqrt(np.clip(w, 0.0, None))


# -- Gaussian -------------------------------------------------------------

@dataclass
class GaussianSpec:
    cov: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = self.cov.shape[0]
        self.mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=float)
        if self.mean.shape != (d,):
            raise ValueError(f"mean must have length {d}")
        self._factor = covariance_factor(self.cov)

    @property
    def d(self) -> int:
        return self.cov.shape[0]

    @classmethod
    def bivariate(cls, sigma1=1.0, sigma2=1.0, rho=0.0):
        c = rho * sigma1 * sigma2
        return cls(np.array([[sigma1 ** 2, c], [c, sigma2 ** 2]]))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        xi = rng.standard_normal((size, self.d))
        return self.mean + xi @ self._factor.T

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "cov": self.cov.tolist(), "mean": self.mean.tolist()}


def sample_gaussian(spec: GaussianSpec, rng: np.random.Generator, size: int | None = None):
    out = spec.sample(rng, 1 if size is None else size)
    return out[0] if size is None else out


# -- bivariate normal distribution ---------------------------------------

# Gauss-Legendre half-rules (nodes on (0, 1), weights) for 6, 12 and 20 points
_GL = {
    6: ([0.9324695142031522, 0.6612093864662647, 0.2386191860831970],
        [0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    12: ([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
          0.5873179542866171, 0.3678314989981802, 0.1252334085114692],
         [0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
          0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
    20: ([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
          0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
          0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
          0.07652652113349733],
         [0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
          0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
          0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
          0.1527533871307259]),
}


def _gauss_legendre(r):
    ar = abs(r)
    n = 6 if ar < 0.3 else 12 if ar < 0.75 else 20
    x, w = (np.array(v) for v in _GL[n])
    return np.concatenate([1 - x, 1 + x]), np.concatenate([w, w])


def _bvnu(h, k, r):
    """P(Y1 > h, Y2 > k) for finite arrays h, k (Drezner-Wesolowsky / Genz)."""
    phi = special.ndtr
    if r == 0:
        return phi(-h) * phi(-k)
    tp = 2 * math.pi
    x, w = _gauss_legendre(r)
    hk = h * k
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2
        asr = math.asin(r) / 2
        sn = np.sin(asr * x)
        e = np.exp((sn * hk[..., None] - hs[..., None]) / (1 - sn * sn))
        return e @ w * asr / tp + phi(-h) * phi(-k)
    if r < 0:
        k = -k
        hk = -hk
    bvn = np.zeros_like(h)
    if abs(r) < 1:
        as_ = 1 - r * r
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        c = (4 - hk) / 8
        d = (12 - hk) / 80
        asr = -(bs / as_ + hk) / 2
        with np.errstate(under="ignore", over="ignore"):
            bvn = np.where(asr > -100,
                           a * np.exp(asr) * (1 - c * (bs - as_) * (1 - d * bs) / 3 + c * d * as_ * as_),
                           0.0)
            b = np.sqrt(bs)
            sp = math.sqrt(tp) * phi(-b / a)
            bvn = bvn - np.where(hk > -100,
                                 np.exp(-hk / 2) * sp * b * (1 - c * bs * (1 - d * bs) / 3), 0.0)
            a /= 2
            xs = (a * x) ** 2
            asr = -(bs[..., None] / xs + hk[..., None]) / 2
            ok = asr > -100
            sp = 1 + c[..., None] * xs * (1 + 5 * d[..., None] * xs)
            rs = np.sqrt(1 - xs)
            ep = np.exp(-(hk[..., None] / 2) * xs / (1 + rs) ** 2) / rs
            terms = np.where(ok, np.exp(np.where(ok, asr, 0.0)) * (sp - ep), 0.0)
        bvn = (a * (terms @ w) - bvn) / tp
    if r > 0:
        return bvn + phi(-np.maximum(h, k))
    low = np.where(h < 0, phi(k) - phi(h), phi(-h) - phi(-k))
    return np.where(h >= k, -bvn, low - bvn)


def bivariate_normal_cdf(a, b, rho: float):
    """``P(Y1 <= a, Y2 <= b)`` for standard normals with correlation ``rho``.

    ``a`` and ``b`` broadcast against each other and may contain infinities.
    Absolute accuracy is about 1e-15.
    """
    rho = float(rho)
    if not abs(rho) < 1:
        raise ValueError(f"rho must lie in (-1, 1), got {rho}")
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("NaN bound")
    h, k = -a, -b
    out = np.empty(a.shape)
    fin = np.isfinite(h) & np.isfinite(k)
    if fin.any():
        out[fin] = _bvnu(h[fin], k[fin], rho)
    inf = ~fin
    if inf.any():
        hi, ki = h[inf], k[inf]
        # with h = -inf the first constraint is void; with h = +inf the event is empty
        val = np.where(hi == -np.inf, special.ndtr(-ki), special.ndtr(-hi))
        val = np.where((hi == np.inf) | (ki == np.inf), 0.0, val)
        out[inf] = val
    out = np.clip(out, 0.0, 1.0)
    return out[()] if out.ndim == 0 else out


# -- Poisson quantiles ----------------------------------------------------

def poisson_cdf_inverse(lam: float, u):
    """Smallest integer ``n`` with ``P(N <= n) >= u`` for ``N ~ Poisson(lam)``."""
    if not lam > 0:
        raise ValueError(f"Poisson intensity must be > 0, got {lam}")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u >= 1) or np.isnan(u).any():
        raise ValueError("u must lie in [0, 1)")
    umax = float(u.max()) if u.size else 0.0
    n = max(16, int(lam + 10 * math.sqrt(lam) + 10))
    while True:
        cdf = stats.poisson.cdf(np.arange(n), lam)
        if cdf[-1] >= umax:
            break
        if n > 1_000_000:
            raise ValueError(f"quantile {umax} unreachable for intensity {lam}")
        n *= 2
    out = np.searchsorted(cdf, u, side="left")
    return int(out) if out.ndim == 0 else out


def _poisson_sf_table(lam: float) -> np.ndarray:
    n = max(32, int(lam + 40 * math.sqrt(lam) + 40))
    while True:
        sf = stats.poisson.sf(np.arange(n), lam)
        if sf[-1] == 0.0:
            return sf
        if n > 1_000_000:
            raise ValueError(f"Poisson survival table for {lam} does not terminate")
        n *= 2


def _poisson_from_upper(sf_table: np.ndarray, q: np.ndarray) -> np.ndarray:
    # first n with P(N > n) <= q, equivalently P(N <= n) >= 1 - q
    return np.searchsorted(-sf_table, -q, side="left")


def poisson_truncation(lam: float, tail: float = TAIL_MASS, cap: int = MAX_TRUNC) -> int:
    """Truncation index: Poisson quantile at ``1 - tail``, capped."""
    return int(min(cap, stats.poisson.isf(tail, lam)))


# -- copula calibration ---------------------------------------------------

def _grid_bounds(lam: float, trunc: int) -> np.ndarray:
    # Phi^{-1}(P_lam(j)) for j = -1 .. trunc
    cdf = stats.poisson.cdf(np.arange(trunc + 1), lam)
    return np.concatenate([[-np.inf], special.ndtri(cdf)])


def count_cross_moment(lambda_k, lambda_l, rho, trunc_k, trunc_l, bounds=None):
    """Truncated ``E[N_k N_l] = sum_{m,n >= 1} m n Z_mn(rho)`` under the Gaussian copula."""
    if bounds is None:
        bounds = (_grid_bounds(lambda_k, trunc_k), _grid_bounds(lambda_l, trunc_l))
    A, B = bounds
    G = bivariate_normal_cdf(A[:, None], B[None, :], rho)
    # Z[m, n] = G[m+1, n+1] - G[m, n+1] - G[m+1, n] + G[m, n]
    Z = G[1:, 1:] - G[:-1, 1:] - G[1:, :-1] + G[:-1, :-1]
    m = np.arange(trunc_k + 1)
    n = np.arange(trunc_l + 1)
    return float(m @ Z @ n)


def count_correlation(lambda_k, lambda_l, rho, trunc_k=None, trunc_l=None):
    """Correlation of Poisson counts produced by Gaussian correlation ``rho``."""
    trunc_k = poisson_truncation(lambda_k) if trunc_k is None else trunc_k
    trunc_l = poisson_truncation(lambda_l) if trunc_l is None else trunc_l
    e = count_cross_moment(lambda_k, lambda_l, rho, trunc_k, trunc_l)
    return (e - lambda_k * lambda_l) / math.sqrt(lambda_k * lambda_l)


def calibrate_pair(lambda_k: float, lambda_l: float, rho_star: float,
                   trunc: int | tuple[int, int] | None = None, tol: float = 1e-6) -> float:
    """Gaussian correlation giving Poisson counts correlation ``rho_star``.

    Solves the implicit moment relation by bisection on ``[-0.999, 0.999]``.
    ``trunc`` fixes both truncation indices; by default each one is the
    Poisson quantile at ``1 - 1e-12`` (capped at 200).
    """
    if not (lambda_k > 0 and lambda_l > 0):
        raise ValueError("intensities must be > 0")
    if not abs(rho_star) < 1:
        raise InfeasibleCorrelationError(
            f"target count correlation {rho_star} outside (-1, 1)", bracket=None)
    if rho_star == 0:
        # the rectangle probabilities factorize at rho = 0, so it is the exact root
        return 0.0
    if trunc is None:
        tk, tl = poisson_truncation(lambda_k), poisson_truncation(lambda_l)
    elif isinstance(trunc, (tuple, list)):
        tk, tl = trunc
    else:
        tk = tl = int(trunc)
    bounds = (_grid_bounds(lambda_k, tk), _grid_bounds(lambda_l, tl))
    target = lambda_k * lambda_l + rho_star * math.sqrt(lambda_k * lambda_l)

    def excess(r):
        return count_cross_moment(lambda_k, lambda_l, r, tk, tl, bounds) - target

    lo, hi = excess(-RHO_BRACKET), excess(RHO_BRACKET)
    if lo > 0 or hi < 0:
        scale = math.sqrt(lambda_k * lambda_l)
        bracket = (rho_star + lo / scale, rho_star + hi / scale)
        raise InfeasibleCorrelationError(
            f"count correlation {rho_star} not reachable for intensities "
            f"({lambda_k}, {lambda_l}); achievable range [{bracket[0]:.6f}, {bracket[1]:.6f}]",
            bracket=bracket)
    if lo == 0:
        return -RHO_BRACKET
    if hi == 0:
        return RHO_BRACKET
    return optimize.bisect(excess, -RHO_BRACKET, RHO_BRACKET, xtol=tol / 4)


# -- compound Poisson -----------------------------------------------------

class JumpKind(str, enum.Enum):
    NORMAL = "normal"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class JumpDistribution:
    """Jump size law: ``normal`` (mu, sigma) or ``exponential`` (rate)."""

    kind: JumpKind
    mu: float = 0.0
    sigma: float = 1.0
    rate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", JumpKind(self.kind))
        if self.kind is JumpKind.NORMAL and not self.sigma > 0:
            raise ValueError("normal jump sigma must be > 0")
        if self.kind is JumpKind.EXPONENTIAL and not self.rate > 0:
            raise ValueError("exponential jump rate must be > 0")

    @classmethod
    def normal(cls, mu, sigma):
        return cls(JumpKind.NORMAL, mu=mu, sigma=sigma)

    @classmethod
    def exponential(cls, rate):
        return cls(JumpKind.EXPONENTIAL, rate=rate)

    @property
    def mean(self) -> float:
        return self.mu if self.kind is JumpKind.NORMAL else 1.0 / self.rate

    @property
    def var(self) -> float:
        return self.sigma ** 2 if self.kind is JumpKind.NORMAL else 1.0 / self.rate ** 2

    def sample(self, rng, size):
        if self.kind is JumpKind.NORMAL:
            return rng.normal(self.mu, self.sigma, size)
        return rng.exponential(1.0 / self.rate, size)

    def to_dict(self) -> dict:
        if self.kind is JumpKind.NORMAL:
            return {"kind": "normal", "mu": self.mu, "sigma": self.sigma}
        return {"kind": "exponential", "rate": self.rate}


@dataclass
class CompoundPoissonSpec:
    """Compound Poisson losses ``X_i = sum_{k <= N_i} G_i^k`` with copula-coupled counts.

    ``target_corr`` is the correlation matrix of the counts ``N_i`` over the
    horizon; ``gauss_corr`` is filled by :func:`calibrate_matrix`.
    """

    intensities: np.ndarray
    horizon: float
    jumps: list[JumpDistribution]
    target_corr: np.ndarray
    gauss_corr: np.ndarray | None = None
    _factor: np.ndarray | None = dc_field(default=None, repr=False)
    _sf_tables: list | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        d = self.intensities.size
        if np.any(self.intensities <= 0):
            raise ValueError("intensities must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if isinstance(self.jumps, JumpDistribution):
            self.jumps = [self.jumps] * d
        if len(self.jumps) != d:
            raise ValueError(f"need {d} jump laws, got {len(self.jumps)}")
        self.target_corr = np.atleast_2d(np.asarray(self.target_corr, dtype=float))
        t = self.target_corr
        if t.shape != (d, d):
            raise ValueError(f"target_corr must be {d}x{d}")
        if not np.allclose(t, t.T, rtol=0, atol=1e-12) or not np.allclose(np.diag(t), 1.0):
            raise ValueError("target_corr must be symmetric with unit diagonal")
        if self.gauss_corr is not None:
            self._set_gauss(np.asarray(self.gauss_corr, dtype=float))

    @property
    def d(self) -> int:
        return self.intensities.size

    @property
    def count_means(self) -> np.ndarray:
        return self.intensities * self.horizon

    @property
    def calibrated(self) -> bool:
        return self.gauss_corr is not None

    def _set_gauss(self, g):
        self.gauss_corr = g
        self._factor = covariance_factor(g)
        self._sf_tables = [_poisson_sf_table(lam) for lam in self.count_means]

    def calibrate(self, trunc=None, tol: float = 1e-6) -> "CompoundPoissonSpec":
        calibrate_matrix(self, trunc=trunc, tol=tol)
        return self

    def sample_counts(self, rng, size: int) -> np.ndarray:
        if not self.calibrated:
            raise RuntimeError("compound Poisson spec is not calibrated; call calibrate() first")
        eta = rng.standard_normal((size, self.d)) @ self._factor.T
        q = special.ndtr(-eta)
        counts = np.empty((size, self.d), dtype=np.int64)
        for i, table in enumerate(self._sf_tables):
            counts[:, i] = _poisson_from_upper(table, q[:, i])
        return counts

    def sample(self, rng, size: int) -> np.ndarray:
        counts = self.sample_counts(rng, size)
        out = np.zeros((size, self.d))
        rows = np.arange(size)
        for i, jump in enumerate(self.jumps):
            c = counts[:, i]
            total = int(c.sum())
            if total:
                g = jump.sample(rng, total)
                out[:, i] = np.bincount(np.repeat(rows, c), weights=g, minlength=size)
        return out

    def mean(self) -> np.ndarray:
        return self.count_means * np.array([j.mean for j in self.jumps])

    def to_dict(self) -> dict:
        out = {
            "kind": "compound_poisson",
            "intensities": self.intensities.tolist(),
            "horizon": self.horizon,
            "jumps": [j.to_dict() for j in self.jumps],
            "target_corr": self.target_corr.tolist(),
        }
        if self.gauss_corr is not None:
            out["gauss_corr"] = self.gauss_corr.tolist()
        return out


def calibrate_matrix(spec: CompoundPoissonSpec, trunc=None, tol: float = 1e-6) -> np.ndarray:
    """Calibrate every pair of ``spec`` and store the Gaussian correlation on it."""
    d = spec.d
    lam = spec.count_means
    g = np.eye(d)
    for k in range(d):
        for l in range(k):
            try:
                r = calibrate_pair(lam[k], lam[l], spec.target_corr[k, l], trunc=trunc, tol=tol)
            except InfeasibleCorrelationError as exc:
                exc.pair = (k, l)
                exc.args = (f"pair ({k}, {l}): {exc.args[0]}",)
                raise
            g[k, l] = g[l, k] = r
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(g)
        if w[0] < -1e-10:
            vec = np.abs(v[:, 0])
            i, j = sorted(np.argsort(vec)[-2:].tolist())
            raise CalibrationError(
                f"calibrated Gaussian correlation is not positive semi-definite "
                f"(min eigenvalue {w[0]:.3g}); most implicated pair ({j}, {i})",
                pairs=[(j, i)]) from None
    spec._set_gauss(g)
    return g


def sample_compound_poisson(spec: CompoundPoissonSpec, rng, size: int | None = None):
    out = spec.sample(rng, 1 if size is None else size)
    return out[0] if size is None else out
