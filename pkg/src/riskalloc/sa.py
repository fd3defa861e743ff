"""Projected Robbins-Monro iteration with Polyak-Ruppert averaging.

The recursion ``Z_k = Proj_K[Z_{k-1} + gamma_k H(X_k, Z_{k-1})]`` is run
on a batch of independent replications at once: every replication owns its
random stream and draws its scenarios in fixed-size chunks, so the result of
a replication does not depend on how replications are grouped.

The estimators of the noise covariance and the Jacobian are fed block-wise
with exactly the ``(X_k, Z_{k-1})`` pairs used by the recursion.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .estimators import CovEstimator, JacEstimator, asymptotic_cov, confidence_interval
from .loss import LossSpec, NonFiniteResultError, field
from .samplers import make_rng

logger = logging.getLogger(__name__)

CHUNK = 1024
MAX_RECORDED = 100_000


@dataclass(frozen=True)
class Rectangle:
    """Projection set ``[lower, upper]``; the last coordinate is the multiplier."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in length")
        if not np.all(lo < hi):
            raise ValueError("rectangle needs lower < upper in every coordinate")
        if lo[-1] < 0:
            raise ValueError("the multiplier coordinate must have a non-negative lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, d: int, m_bounds=(0.0, 2.0), lambda_max: float = 2.0) -> "Rectangle":
        lo = np.r_[np.full(d, m_bounds[0]), 0.0]
        hi = np.r_[np.full(d, m_bounds[1]), lambda_max]
        return cls(lo, hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def project(self, z) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)

    def contains(self, z) -> bool:
        z = np.asarray(z)
        return bool(np.all((z >= self.lower) & (z <= self.upper)))

    def uniform(self, rng: np.random.Generator) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random(self.dim)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def project(rect: Rectangle, z) -> np.ndarray:
    return rect.project(z)


@dataclass(frozen=True)
class StepSchedule:
    """``gamma_k = c / k**gamma``, or ``Gamma / k`` when a gain matrix is given."""

    c: float = 1.0
    gamma: float = 1.0
    gain_matrix: np.ndarray | None = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("step constant c must be > 0")
        if not 0.5 < self.gamma <= 1:
            raise ValueError(f"step exponent must lie in (1/2, 1], got {self.gamma}")
        if self.gain_matrix is not None:
            g = np.atleast_2d(np.asarray(self.gain_matrix, dtype=float))
            if g.shape[0] != g.shape[1]:
                raise ValueError("gain matrix must be square")
            if self.gamma != 1:
                raise ValueError("a gain matrix requires gamma = 1")
            object.__setattr__(self, "gain_matrix", g)

    def step(self, k):
        """Scalar step size at index ``k`` (the gain matrix, if any, multiplies ``1/k``)."""
        k = np.asarray(k, dtype=float)
        if self.gain_matrix is not None:
            return 1.0 / k
        return self.c / k ** self.gamma

    def to_dict(self) -> dict:
        return {"c": self.c, "gamma": self.gamma,
                "gain_matrix": None if self.gain_matrix is None else self.gain_matrix.tolist()}


@dataclass(frozen=True)
class RunConfig:
    """Settings of one run.

    ``averaging_t`` switches on the averaged estimator: the run is extended
    past ``n_steps`` so that the window ``Z_n, ..., Z_{n+W-1}`` with
    ``W = floor(t / gamma_n)`` is available.  ``z0`` is either a point of
    ``rect`` or ``"uniform"``.  ``thin=None`` records every iterate while
    ``n_steps <= 100000`` and strides otherwise.
    """

    n_steps: int
    schedule: StepSchedule
    rect: Rectangle
    averaging_t: float | None = None
    seed: int = 0
    z0: object = "uniform"
    thin: int | None = None
    estimate: bool = True
    jac_epsilon: float | None = None
    estimator_window: int | None = None

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if self.averaging_t is not None:
            if not self.averaging_t > 0:
                raise ValueError("averaging parameter t must be > 0")
            if self.schedule.gamma >= 1:
                raise ValueError("averaging requires a step exponent gamma < 1")
        if self.thin is not None and self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.estimator_window is not None and self.estimator_window < 1:
            raise ValueError("estimator_window must be >= 1")
        if not isinstance(self.z0, str):
            z0 = np.asarray(self.z0, dtype=float)
            if z0.shape != (self.rect.dim,):
                raise ValueError(f"z0 must have length {self.rect.dim}")
            if not self.rect.contains(z0):
                raise ValueError("z0 lies outside the projection rectangle")
            object.__setattr__(self, "z0", z0)
        elif self.z0 != "uniform":
            raise ValueError(f"unknown z0 mode {self.z0!r}")

    @property
    def dim(self) -> int:
        return self.rect.dim

    @property
    def pr_window(self) -> int:
        """Number of averaged iterates, ``floor(t / gamma_n)``."""
        if self.averaging_t is None:
            return 0
        return max(1, math.floor(self.averaging_t / float(self.schedule.step(self.n_steps))))

    @property
    def total_steps(self) -> int:
        return self.n_steps + max(self.pr_window - 1, 0)

    @property
    def stride(self) -> int:
        if self.thin is not None:
            return self.thin
        return 1 if self.n_steps <= MAX_RECORDED else math.ceil(self.n_steps / MAX_RECORDED)

    @property
    def epsilon(self) -> float:
        if self.jac_epsilon is not None:
            return self.jac_epsilon
        scale = float(np.max((self.rect.upper - self.rect.lower) / 2))
        return 1e-3 * (1.0 + scale)

    def to_dict(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "schedule": self.schedule.to_dict(),
            "rect": self.rect.to_dict(),
            "averaging_t": self.averaging_t,
            "seed": self.seed,
            "z0": self.z0 if isinstance(self.z0, str) else self.z0.tolist(),
            "thin": self.stride,
            "estimate": self.estimate,
            "jac_epsilon": self.epsilon,
            "estimator_window": self.estimator_window,
        }


@dataclass
class Trajectory:
    """Output of a single run.

    ``final`` is ``Z_n``; ``last`` is the last iterate of the (possibly
    extended) run.  ``clamped`` holds, per recorded step, a bitmask whose
    bit ``j`` is set when coordinate ``j`` was clamped by the projection.
    """

    steps: np.ndarray
    iterates: np.ndarray
    clamped: np.ndarray
    z0: np.ndarray
    final: np.ndarray
    last: np.ndarray
    pr_average: np.ndarray | None
    clamp_counts: np.ndarray
    cov: CovEstimator | None = None
    jac: JacEstimator | None = None
    history: list = dc_field(default_factory=list)
    wall_time: float = 0.0

    @property
    def sigma_n(self):
        return None if self.cov is None else self.cov.sigma

    @property
    def a_n(self):
        return None if self.jac is None else self.jac.jacobian

    def v_n(self):
        return asymptotic_cov(self.cov, self.jac)


@dataclass
class _Batch:
    z0: np.ndarray
    final: np.ndarray
    last: np.ndarray
    pr_average: np.ndarray | None
    clamp_counts: np.ndarray
    late_clamps: np.ndarray
    cov: CovEstimator | None
    jac: JacEstimator | None
    history: list
    steps: np.ndarray | None = None
    iterates: np.ndarray | None = None
    clamped: np.ndarray | None = None


def _record_steps(config: RunConfig) -> np.ndarray:
    total = config.total_steps
    ks = np.arange(0, total + 1)
    keep = ks % config.stride == 0
    if config.averaging_t is not None:
        keep |= ks >= config.n_steps
    keep[config.n_steps] = True
    keep[total] = True
    return ks[keep]


def _simulate(config: RunConfig, loss: LossSpec, sampler, rngs, record: bool) -> _Batch:
    reps = len(rngs)
    dim = config.dim
    d = loss.d
    if dim != d + 1:
        raise ValueError(f"rectangle dimension {dim} does not match loss dimension {d} + 1")
    if sampler.d != d:
        raise ValueError(f"sampler dimension {sampler.d} does not match loss dimension {d}")
    lo, hi = config.rect.lower, config.rect.upper
    n, total = config.n_steps, config.total_steps
    sched = config.schedule
    gain = sched.gain_matrix
    if gain is not None and gain.shape != (dim, dim):
        raise ValueError(f"gain matrix must be {dim}x{dim}")

    if isinstance(config.z0, str):
        z = np.stack([config.rect.uniform(rng) for rng in rngs])
    else:
        z = np.tile(config.z0, (reps, 1))
    z0 = z.copy()

    est_start = 0 if config.estimator_window is None else max(0, total - config.estimator_window)
    cov = jac = None
    if config.estimate:
        cov = CovEstimator(dim, (reps,))
        jac = JacEstimator(dim, config.epsilon, (reps,))
    history = []

    window = config.pr_window
    pr_sum = np.zeros((reps, dim)) if config.averaging_t is not None else None
    clamp_counts = np.zeros((reps, dim), dtype=np.int64)
    late_clamps = np.zeros((reps, dim), dtype=np.int64)
    late_from = n // 2

    if record:
        rec_steps = _record_steps(config)
        rec_iter = np.empty((len(rec_steps), reps, dim))
        rec_flag = np.zeros((len(rec_steps), reps), dtype=np.int64)
        rec_iter[0] = z
        rec_pos = 1
        next_rec = rec_steps[1] if len(rec_steps) > 1 else -1
    bits = 1 << np.arange(dim)

    final = z.copy() if n == 0 else None
    steps = sched.step(np.arange(1, total + 1))
    xbuf = np.empty((CHUNK, reps, d))
    zbuf = np.empty((CHUNK, reps, dim))
    hbuf = np.empty((CHUNK, reps, dim))

    for start in range(0, total, CHUNK):
        size = min(CHUNK, total - start)
        for r, rng in enumerate(rngs):
            xbuf[:size, r] = sampler.sample(rng, size)
        for i in range(size):
            k = start + i + 1
            try:
                h = field(loss, xbuf[i], z)
            except NonFiniteResultError as exc:
                err = NonFiniteResultError(f"step {k}: {exc}")
                err.step = k
                raise err from exc
            zbuf[i] = z
            hbuf[i] = h
            if gain is None:
                y = z + steps[k - 1] * h
            else:
                y = z + (h @ gain.T) / k
            z = np.clip(y, lo, hi)
            moved = y != z
            clamp_counts += moved
            if k > late_from:
                late_clamps += moved
            if k == n:
                final = z.copy()
            if pr_sum is not None and k >= n:
                # deviations from Z_n, so a constant window averages to Z_n exactly
                pr_sum += z - final
            if record and k == next_rec:
                rec_iter[rec_pos] = z
                rec_flag[rec_pos] = moved @ bits
                rec_pos += 1
                next_rec = rec_steps[rec_pos] if rec_pos < len(rec_steps) else -1
        hb = hbuf[:size]
        if not np.all(np.isfinite(hb)):
            bad = int(np.argwhere(~np.isfinite(hb))[0][0])
            err = NonFiniteResultError(f"step {start + bad + 1}: non-finite field value")
            err.step = start + bad + 1
            raise err
        if cov is not None:
            lo_i = max(0, est_start - start)
            if lo_i < size:
                cov.update_many(hb[lo_i:])
                jac.update_many(loss, xbuf[lo_i:size], zbuf[lo_i:size], hb[lo_i:])
                history.append((start + size, cov.sigma.copy(), jac.jacobian.copy()))

    batch = _Batch(
        z0=z0, final=final, last=z, clamp_counts=clamp_counts, late_clamps=late_clamps,
        pr_average=None if pr_sum is None else final + pr_sum / window,
        cov=cov, jac=jac, history=history)
    if record:
        batch.steps = rec_steps
        batch.iterates = rec_iter
        batch.clamped = rec_flag
    return batch


def _warn_boundary(late_clamps, n):
    if np.any(late_clamps):
        logger.warning(
            "iterates hit the projection boundary after step %d (clamped steps per coordinate: %s); "
            "the rectangle may not contain the root in its interior", n // 2,
            np.asarray(late_clamps).tolist())


def run_rm(config: RunConfig, loss: LossSpec, sampler, rng: np.random.Generator | None = None) -> Trajectory:
    """Run one projected Robbins-Monro trajectory.

    The stream is ``make_rng(config.seed)`` unless ``rng`` is supplied.
    """
    if rng is None:
        rng = make_rng(config.seed)
    t0 = time.perf_counter()
    b = _simulate(config, loss, sampler, [rng], record=True)
    wall = time.perf_counter() - t0
    _warn_boundary(b.late_clamps[0], config.n_steps)
    cov = jac = None
    if b.cov is not None:
        cov = CovEstimator(config.dim)
        cov.n, cov.sum_outer = b.cov.n, b.cov.sum_outer[0]
        jac = JacEstimator(config.dim, b.jac.epsilon)
        jac.n, jac.sum_diff = b.jac.n, b.jac.sum_diff[0]
    return Trajectory(
        steps=b.steps, iterates=b.iterates[:, 0], clamped=b.clamped[:, 0],
        z0=b.z0[0], final=b.final[0], last=b.last[0],
        pr_average=None if b.pr_average is None else b.pr_average[0],
        clamp_counts=b.clamp_counts[0], cov=cov, jac=jac,
        history=[(k, s[0], a[0]) for k, s, a in b.history], wall_time=wall)


def pr_average(traj: Trajectory, config: RunConfig) -> np.ndarray:
    """Uniform mean of the recorded iterates ``Z_n, ..., Z_{n+W-1}``, ``W = floor(t/gamma_n)``."""
    if config.schedule.gamma >= 1:
        raise ValueError("Polyak-Ruppert averaging requires gamma < 1")
    if config.averaging_t is None:
        raise ValueError("run was configured without an averaging parameter")
    n, w = config.n_steps, config.pr_window
    mask = (traj.steps >= n) & (traj.steps <= n + w - 1)
    if mask.sum() != w:
        raise ValueError(f"averaging window of {w} iterates exceeds the recorded range")
    win = traj.iterates[mask]
    return win[0] + (win - win[0]).mean(axis=0)


def normalized_error(estimate, z_star, config: RunConfig, mode: str) -> np.ndarray:
    """``sqrt(n^gamma) (Z_n - z*)`` for RM, ``sqrt(t n^gamma) (Zbar_n - z*)`` for PR."""
    scale = config.n_steps ** config.schedule.gamma
    if mode == "PR":
        scale *= config.averaging_t
    return math.sqrt(scale) * (np.asarray(estimate) - np.asarray(z_star))


class ReplicationError(RuntimeError):
    def __init__(self, message, index, partial):
        super().__init__(message)
        self.index = index
        self.partial = partial


@dataclass
class Replications:
    """Per-replication estimates (``Z_n`` or ``Zbar_n``) and their normalized errors."""

    mode: str
    estimates: np.ndarray
    errors: np.ndarray | None
    v_n: np.ndarray | None
    intervals: dict
    clamp_counts: np.ndarray
    wall_time: float


def _batch_job(args):
    config, loss, sampler, reps = args
    rngs = [make_rng(config.seed, r) for r in reps]
    return _simulate(config, loss, sampler, rngs, record=False)


def run_replications(config: RunConfig, loss: LossSpec, sampler, N: int, mode: str = "RM",
                     z_star=None, workers: int = 1, batch_size: int = 500,
                     alpha_level: float = 0.05) -> Replications:
    """Run ``N`` independent replications; replication ``i`` uses ``make_rng(seed, i)``.

    ``mode="RM"`` keeps ``Z_n``; ``mode="PR"`` keeps the averaged iterate and,
    when estimation is on, the per-replication confidence intervals under
    both scalings.  Output rows follow replication order.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    mode = mode.upper()
    if mode not in ("RM", "PR"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "RM" and config.averaging_t is not None:
        config = replace(config, averaging_t=None)
    if mode == "PR" and config.averaging_t is None:
        raise ValueError("PR mode requires an averaging parameter t")
    groups = [list(range(s, min(N, s + batch_size))) for s in range(0, N, batch_size)]
    jobs = [(config, loss, sampler, g) for g in groups]
    t0 = time.perf_counter()
    results = []
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res in pool.map(_batch_job, jobs):
                    results.append(res)
        else:
            for job in jobs:
                results.append(_batch_job(job))
    except Exception as exc:
        failed = groups[len(results)]
        done = np.concatenate([r.pr_average if mode == "PR" else r.final for r in results]) \
            if results else np.empty((0, config.dim))
        raise ReplicationError(
            f"replication batch starting at {failed[0]} failed: {exc}", failed[0], done) from exc
    wall = time.perf_counter() - t0

    est = np.concatenate([r.pr_average if mode == "PR" else r.final for r in results])
    clamps = np.concatenate([r.clamp_counts for r in results])
    errors = None if z_star is None else normalized_error(est, z_star, config, mode)
    v_n = None
    intervals = {}
    if mode == "PR" and config.estimate:
        v_list = []
        for r in results:
            try:
                v_list.append(asymptotic_cov(r.cov, r.jac))
            except np.linalg.LinAlgError:
                v_list.append(np.stack([_safe_v(s, a) for s, a in zip(r.cov.sigma, r.jac.jacobian)]))
        v_n = np.concatenate(v_list)
        sched = config.schedule
        for scaling in ("printed", "step"):
            ok = np.all(np.diagonal(v_n, axis1=1, axis2=2) >= 0, axis=1)
            ci = np.full(est.shape + (2,), np.nan)
            ci[ok] = confidence_interval(est[ok], v_n[ok], config.n_steps, config.averaging_t,
                                         sched.gamma, sched.c, alpha_level, scaling)
            intervals[scaling] = ci
    return Replications(mode=mode, estimates=est, errors=errors, v_n=v_n, intervals=intervals,
                        clamp_counts=clamps, wall_time=wall)


def _safe_v(sigma, a):
    try:
        return asymptotic_cov(sigma, a)
    except np.linalg.LinAlgError:
        return np.full_like(sigma, np.nan)
