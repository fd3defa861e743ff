"""JSON experiment configuration.

A config is one JSON document with sections ``loss``, ``sampler``, ``run``
and optionally ``replicate``, ``oracle``, ``calibration`` and ``output``.
Validation errors name the offending field path, e.g. ``run.n_steps``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .loss import LossKind, LossSpec
from .sa import Rectangle, RunConfig, StepSchedule
from .samplers import CompoundPoissonSpec, GaussianSpec, JumpDistribution


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    loss: LossSpec
    sampler: object
    run: RunConfig
    alpha_level: float = 0.05
    replicate: dict | None = None
    oracle: dict | None = None
    calibration: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def materialized(self) -> dict:
        """Config with every default filled in, for the audit trail."""
        return {
            "loss": self.loss.to_dict(),
            "sampler": self.sampler.to_dict(),
            "run": {**self.run.to_dict(), "alpha_level": self.alpha_level},
            "replicate": self.replicate,
            "oracle": self.oracle,
            "calibration": self.calibration,
            "output": self.output,
        }


def _get(section: dict, key: str, path: str, kind=None, default=..., check=None, msg=""):
    if key not in section or section[key] is None:
        if default is ...:
            raise ConfigError(f"{path}.{key}", "required")
        return default
    val = section[key]
    if kind is not None:
        try:
            if kind is int:
                if isinstance(val, bool) or float(val) != int(float(val)):
                    raise ValueError
                val = int(float(val))
            else:
                val = kind(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}", f"expected {kind.__name__}, got {section[key]!r}") from None
    if check is not None and not check(val):
        raise ConfigError(f"{path}.{key}", msg or f"invalid value {val!r}")
    return val


def _matrix(val, path, shape=None):
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a numeric matrix") from None
    if arr.ndim != 2 or (shape is not None and arr.shape != shape):
        raise ConfigError(path, f"expected shape {shape}, got {arr.shape}")
    return arr


def _section(raw, key, required=True):
    sec = raw.get(key)
    if sec is None:
        if required:
            raise ConfigError(key, "required section missing")
        return None
    if not isinstance(sec, dict):
        raise ConfigError(key, "must be an object")
    return sec


def parse_loss(sec: dict) -> LossSpec:
    kind = _get(sec, "kind", "loss", str, check=lambda k: k in {e.value for e in LossKind},
                msg="must be 'exponential' or 'pospart_quadratic'")
    d = _get(sec, "d", "loss", int, check=lambda v: v >= 2, msg="must be >= 2")
    alpha = _get(sec, "alpha", "loss", float, default=1.0, check=lambda v: v >= 0, msg="must be >= 0")
    beta = _get(sec, "beta", "loss", float, default=1.0, check=lambda v: v > 0, msg="must be > 0")
    return LossSpec(LossKind(kind), d, alpha, beta)


def _parse_jump(j, path):
    if not isinstance(j, dict):
        raise ConfigError(path, "jump law must be an object")
    kind = _get(j, "kind", path, str, check=lambda k: k in ("normal", "exponential"),
                msg="must be 'normal' or 'exponential'")
    if kind == "normal":
        return JumpDistribution.normal(_get(j, "mu", path, float, default=0.0),
                                       _get(j, "sigma", path, float, check=lambda v: v > 0, msg="must be > 0"))
    return JumpDistribution.exponential(_get(j, "rate", path, float, check=lambda v: v > 0, msg="must be > 0"))


def parse_sampler(sec: dict, d: int):
    kind = _get(sec, "kind", "sampler", str, check=lambda k: k in ("gaussian", "compound_poisson"),
                msg="must be 'gaussian' or 'compound_poisson'")
    if kind == "gaussian":
        cov = _matrix(_get(sec, "cov", "sampler"), "sampler.cov", (d, d))
        mean = sec.get("mean")
        if mean is not None and np.shape(mean) != (d,):
            raise ConfigError("sampler.mean", f"expected length {d}")
        try:
            return GaussianSpec(cov, mean)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ConfigError("sampler.cov", str(exc)) from None
    lam = np.asarray(_get(sec, "intensities", "sampler"), dtype=float)
    if lam.shape != (d,):
        raise ConfigError("sampler.intensities", f"expected length {d}, got {lam.shape}")
    horizon = _get(sec, "horizon", "sampler", float, default=1.0, check=lambda v: v > 0, msg="must be > 0")
    jumps = _get(sec, "jumps", "sampler")
    if isinstance(jumps, list):
        if len(jumps) != d:
            raise ConfigError("sampler.jumps", f"expected {d} jump laws")
        laws = [_parse_jump(j, f"sampler.jumps[{i}]") for i, j in enumerate(jumps)]
    else:
        laws = [_parse_jump(jumps, "sampler.jumps")] * d
    target = _matrix(_get(sec, "target_corr", "sampler", default=np.eye(d).tolist()),
                     "sampler.target_corr", (d, d))
    gauss = sec.get("gauss_corr")
    try:
        return CompoundPoissonSpec(lam, horizon, laws, target,
                                   None if gauss is None else _matrix(gauss, "sampler.gauss_corr", (d, d)))
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError("sampler", str(exc)) from None


def parse_run(sec: dict, d: int, seed_override=None) -> tuple[RunConfig, float]:
    p = "run"
    n = _get(sec, "n_steps", p, int, check=lambda v: v >= 1, msg="must be >= 1")
    c = _get(sec, "c", p, float, default=1.0, check=lambda v: v > 0, msg="must be > 0")
    gamma = _get(sec, "gamma", p, float, default=1.0, check=lambda v: 0.5 < v <= 1, msg="must lie in (1/2, 1]")
    gain = sec.get("gain_matrix")
    if gain is not None:
        gain = _matrix(gain, "run.gain_matrix", (d + 1, d + 1))
        if gamma != 1:
            raise ConfigError("run.gain_matrix", "requires gamma = 1")
    rect_sec = sec.get("rect", {})
    if not isinstance(rect_sec, dict):
        raise ConfigError("run.rect", "must be an object")
    if "lower" in rect_sec or "upper" in rect_sec:
        lower = np.asarray(_get(rect_sec, "lower", "run.rect"), dtype=float)
        upper = np.asarray(_get(rect_sec, "upper", "run.rect"), dtype=float)
        for name, arr in (("lower", lower), ("upper", upper)):
            if arr.shape != (d + 1,):
                raise ConfigError(f"run.rect.{name}", f"expected length {d + 1}")
    else:
        mb = rect_sec.get("m_bounds", [0.0, 2.0])
        lmax = rect_sec.get("lambda_max", 2.0)
        lower = np.r_[np.full(d, float(mb[0])), 0.0]
        upper = np.r_[np.full(d, float(mb[1])), float(lmax)]
    try:
        rect = Rectangle(lower, upper)
    except ValueError as exc:
        raise ConfigError("run.rect", str(exc)) from None
    t = _get(sec, "averaging_t", p, float, default=None, check=lambda v: v > 0, msg="must be > 0")
    if t is not None and gamma >= 1:
        raise ConfigError("run.averaging_t", "averaging requires gamma < 1")
    if seed_override is not None:
        seed = int(seed_override)
    else:
        seed = _get(sec, "seed", p, int, check=lambda v: 0 <= v < 2 ** 64, msg="must be a 64-bit unsigned integer")
    z0 = sec.get("z0", "uniform")
    if not isinstance(z0, str):
        z0 = np.asarray(z0, dtype=float)
        if z0.shape != (d + 1,):
            raise ConfigError("run.z0", f"expected 'uniform' or a vector of length {d + 1}")
        if not rect.contains(z0):
            raise ConfigError("run.z0", "outside the projection rectangle")
    elif z0 != "uniform":
        raise ConfigError("run.z0", "expected 'uniform' or a vector")
    thin = _get(sec, "thin", p, int, default=None, check=lambda v: v >= 1, msg="must be >= 1")
    estimate = bool(sec.get("estimate", True))
    eps = _get(sec, "jac_epsilon", p, float, default=None, check=lambda v: v > 0, msg="must be > 0")
    window = _get(sec, "estimator_window", p, int, default=None, check=lambda v: v >= 1, msg="must be >= 1")
    alpha_level = _get(sec, "alpha_level", p, float, default=0.05, check=lambda v: 0 < v < 1,
                       msg="must lie in (0, 1)")
    cfg = RunConfig(n_steps=n, schedule=StepSchedule(c, gamma, gain), rect=rect, averaging_t=t,
                    seed=seed, z0=z0, thin=thin, estimate=estimate, jac_epsilon=eps,
                    estimator_window=window)
    return cfg, alpha_level


def parse_config(raw: dict, seed_override=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    loss = parse_loss(_section(raw, "loss"))
    sampler = parse_sampler(_section(raw, "sampler"), loss.d)
    run, alpha_level = parse_run(_section(raw, "run"), loss.d, seed_override)
    rep = _section(raw, "replicate", required=False)
    if rep is not None:
        rep = {
            "N": _get(rep, "N", "replicate", int, check=lambda v: v >= 1, msg="must be >= 1"),
            "mode": _get(rep, "mode", "replicate", str, default="RM", check=lambda v: v.upper() in ("RM", "PR"),
                         msg="must be 'RM' or 'PR'").upper(),
            "batch_size": _get(rep, "batch_size", "replicate", int, default=500, check=lambda v: v >= 1),
        }
        if rep["mode"] == "PR" and run.averaging_t is None:
            raise ConfigError("replicate.mode", "PR mode needs run.averaging_t")
    orc = _section(raw, "oracle", required=False)
    if orc is not None:
        kind = _get(orc, "kind", "oracle", str, check=lambda v: v in ("closed_form", "saa", "given"),
                    msg="must be 'closed_form', 'saa' or 'given'")
        orc = {"kind": kind}
        src = raw["oracle"]
        if kind == "saa":
            orc["n_samples"] = _get(src, "n_samples", "oracle", int, default=1_000_000, check=lambda v: v >= 1)
            orc["seed"] = _get(src, "seed", "oracle", int, default=0)
            orc["tol"] = _get(src, "tol", "oracle", float, default=1e-6)
        elif kind == "given":
            zs = np.asarray(_get(src, "z_star", "oracle"), dtype=float)
            if zs.shape != (loss.d + 1,):
                raise ConfigError("oracle.z_star", f"expected length {loss.d + 1}")
            orc["z_star"] = zs.tolist()
    cal = _section(raw, "calibration", required=False) or {}
    cal = {
        "tol": _get(cal, "tol", "calibration", float, default=1e-6, check=lambda v: v > 0),
        "trunc": _get(cal, "trunc", "calibration", int, default=None, check=lambda v: v >= 1),
        "check_draws": _get(cal, "check_draws", "calibration", int, default=100_000, check=lambda v: v >= 0),
    }
    out = _section(raw, "output", required=False) or {}
    out = {"dir": str(out.get("dir", "out")), "formats": list(out.get("formats", ["csv", "json"]))}
    return ExperimentConfig(loss, sampler, run, alpha_level, rep, orc, cal, out, raw)


def load_config(path, seed_override=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_config(raw, seed_override)
