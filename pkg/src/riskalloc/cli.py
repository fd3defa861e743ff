"""Command-line front end.

Subcommands: ``calibrate``, ``run``, ``replicate``, ``oracle``.
Exit codes: 0 success, 2 config error, 3 infeasible calibration, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .config import ConfigError, ExperimentConfig, load_config
from .estimators import (SingularJacobianError, asymptotic_cov, confidence_interval,
                         diagnose_gain)
from .loss import LossKind, NonFiniteResultError
from .oracle import ExpGaussParams, SAAConvergenceError, exact_allocation, saa_root, src
from .sa import ReplicationError, run_replications, run_rm
from .samplers import (CalibrationError, CompoundPoissonSpec, GaussianSpec,
                       InfeasibleCorrelationError, calibrate_matrix, count_correlation,
                       make_rng)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

log = logging.getLogger("riskalloc")


class OracleUnavailable(ConfigError):
    pass


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ensure_calibrated(cfg: ExperimentConfig) -> None:
    s = cfg.sampler
    if isinstance(s, CompoundPoissonSpec) and not s.calibrated:
        calibrate_matrix(s, trunc=cfg.calibration["trunc"], tol=cfg.calibration["tol"])


def _closed_form_params(cfg: ExperimentConfig) -> ExpGaussParams:
    s, loss = cfg.sampler, cfg.loss
    if not (loss.kind is LossKind.EXPONENTIAL and loss.d == 2 and isinstance(s, GaussianSpec)
            and np.all(s.mean == 0)):
        raise OracleUnavailable("oracle.kind", "closed form exists only for the exponential loss "
                                "with d = 2 and centered Gaussian losses; use 'saa'")
    sig = np.sqrt(np.diag(s.cov))
    rho = s.cov[0, 1] / (sig[0] * sig[1])
    return ExpGaussParams(sig[0], sig[1], rho, loss.alpha, loss.beta)


def resolve_oracle(cfg: ExperimentConfig) -> dict:
    spec = cfg.oracle or {"kind": "closed_form"}
    kind = spec["kind"]
    if kind == "given":
        return {"kind": kind, "z_star": spec["z_star"]}
    if kind == "closed_form":
        p = _closed_form_params(cfg)
        val, limit = src(p, with_flag=True)
        return {"kind": kind, "z_star": exact_allocation(p).tolist(), "src": val,
                "src_alpha_zero_limit": limit}
    _ensure_calibrated(cfg)
    t0 = time.perf_counter()
    z = saa_root(cfg.loss, cfg.sampler, n_samples=spec["n_samples"], seed=spec["seed"], tol=spec["tol"])
    return {"kind": kind, "z_star": z.tolist(), "n_samples": spec["n_samples"], "seed": spec["seed"],
            "wall_time_s": time.perf_counter() - t0}


# -- subcommands ------------------------------------------------------------

def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    s = cfg.sampler
    if not isinstance(s, CompoundPoissonSpec):
        raise ConfigError("sampler.kind", "calibrate needs a compound_poisson sampler")
    out = _out_dir(cfg, args)
    g = calibrate_matrix(s, trunc=cfg.calibration["trunc"], tol=cfg.calibration["tol"])
    draws = cfg.calibration["check_draws"]
    emp = None
    if draws > 1:
        counts = s.sample_counts(make_rng(cfg.run.seed), draws)
        emp = np.corrcoef(counts, rowvar=False)
    lam = s.count_means
    rows = []
    for k in range(s.d):
        for l in range(k):
            row = {
                "k": k, "l": l, "lambda_k": lam[k], "lambda_l": lam[l],
                "target": s.target_corr[k, l], "gauss_corr": g[k, l],
                "model_corr": count_correlation(lam[k], lam[l], g[k, l]),
            }
            row["model_abs_err"] = abs(row["model_corr"] - row["target"])
            row["simulated_corr"] = None if emp is None else emp[k, l]
            rows.append(row)
    payload = {
        "gauss_corr": g, "pairs": rows, "check_draws": draws,
        "max_model_abs_err": max((r["model_abs_err"] for r in rows), default=0.0),
        "max_simulated_abs_err": None if emp is None else
        max((abs(r["simulated_corr"] - r["target"]) for r in rows), default=0.0),
        "tol": cfg.calibration["tol"],
    }
    report.write_json(out / "calibration.json", payload)
    cols = ["k", "l", "lambda_k", "lambda_l", "target", "gauss_corr", "model_corr", "model_abs_err",
            "simulated_corr"]
    with open(out / "calibration.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join("" if r[c] is None else str(r[c]) if c in ("k", "l") else repr(float(r[c]))
                               for c in cols) + "\n")
    print(json.dumps(report.to_jsonable({"gauss_corr": g, "max_model_abs_err": payload["max_model_abs_err"]})))
    return EXIT_OK


def _estimator_block(traj, cfg: ExperimentConfig) -> tuple[dict, int]:
    run = cfg.run
    sched = run.schedule
    block = {"sigma_n": None, "a_n": None, "v_n": None, "condition_numbers": {},
             "confidence_intervals": None, "gain_diagnostic": None,
             "estimator_notes": "sigma_n is the uncentered second moment of H; "
                                "it differs from Cov(H) by h h^T, which vanishes at the root"}
    if traj.cov is None:
        return block, EXIT_OK
    block["sigma_n"] = traj.sigma_n
    block["a_n"] = traj.a_n
    block["jacobian_epsilon"] = traj.jac.epsilon
    block["estimator_count"] = traj.cov.n
    block["condition_numbers"] = {"a_n": float(np.linalg.cond(traj.a_n)),
                                  "sigma_n": float(np.linalg.cond(traj.sigma_n))}
    gain = sched.gain_matrix if sched.gain_matrix is not None else sched.c
    block["gain_diagnostic"] = diagnose_gain(gain, traj.a_n)
    try:
        v = asymptotic_cov(traj.cov, traj.jac)
    except SingularJacobianError as exc:
        block["estimator_error"] = str(exc)
        return block, EXIT_NUMERIC
    block["v_n"] = v
    if traj.pr_average is not None:
        cis = {"alpha_level": cfg.alpha_level}
        for scaling in ("printed", "step"):
            try:
                cis[scaling] = confidence_interval(traj.pr_average, v, run.n_steps, run.averaging_t,
                                                   sched.gamma, sched.c, cfg.alpha_level, scaling)
            except ValueError as exc:
                block["estimator_error"] = str(exc)
                return block, EXIT_NUMERIC
        block["confidence_intervals"] = cis
    return block, EXIT_OK


def cmd_run(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    _ensure_calibrated(cfg)
    t0 = time.perf_counter()
    traj = run_rm(cfg.run, cfg.loss, cfg.sampler)
    block, code = _estimator_block(traj, cfg)
    d = cfg.loss.d
    report.write_trajectory_csv(out / "trajectory.csv", traj, d)
    if traj.history:
        report.write_vn_history_csv(out / "vn_history.csv", traj.history, asymptotic_cov)
    payload = {
        "config": cfg.materialized(),
        "z0": traj.z0,
        "final": traj.final,
        "last": traj.last,
        "pr_average": traj.pr_average,
        "pr_window": cfg.run.pr_window,
        "total_steps": cfg.run.total_steps,
        **block,
        "boundary_contacts": traj.clamp_counts,
        "wall_time_s": time.perf_counter() - t0,
        "iteration_time_s": traj.wall_time,
    }
    if isinstance(cfg.sampler, CompoundPoissonSpec):
        payload["calibration"] = {"gauss_corr": cfg.sampler.gauss_corr}
    data = report.write_json(out / "results.json", payload)
    report.validate_results(data)
    print(json.dumps({"final": data["final"], "pr_average": data["pr_average"],
                      "confidence_intervals": data["confidence_intervals"]}))
    if code != EXIT_OK:
        print(f"numerical failure: {block.get('estimator_error')}", file=sys.stderr)
    return code


def summarize_replications(res, z_star, names) -> dict:
    summary = {"mode": res.mode, "N": len(res.estimates), "z_star": z_star,
               "mean": res.estimates.mean(axis=0), "std": res.estimates.std(axis=0, ddof=1)
               if len(res.estimates) > 1 else np.zeros(len(names)),
               "wall_time_s": res.wall_time}
    err = res.estimates - np.asarray(z_star)
    q05, q95 = np.quantile(err, [0.05, 0.95], axis=0)
    summary["central90_width"] = q95 - q05
    summary["ks_standardized"] = {n: report.ks_normal(res.errors[:, i]) for i, n in enumerate(names)}
    summary["ecdf_error"] = {n: report.ecdf_grid(err[:, i]) for i, n in enumerate(names)}
    if res.intervals:
        cov = {}
        for scaling, ci in res.intervals.items():
            inside = (ci[..., 0] <= z_star) & (z_star <= ci[..., 1])
            cov[scaling] = {n: float(np.mean(inside[:, i])) for i, n in enumerate(names)}
            cov[scaling + "_mean_half_width"] = {
                n: float(np.nanmean(ci[:, i, 1] - ci[:, i, 0]) / 2) for i, n in enumerate(names)}
        summary["coverage"] = cov
    return summary


def cmd_replicate(cfg: ExperimentConfig, args) -> int:
    if cfg.replicate is None:
        raise ConfigError("replicate", "required section missing")
    out = _out_dir(cfg, args)
    _ensure_calibrated(cfg)
    orc = resolve_oracle(cfg)
    z_star = np.asarray(orc["z_star"])
    rep = cfg.replicate
    res = run_replications(cfg.run, cfg.loss, cfg.sampler, rep["N"], rep["mode"], z_star=z_star,
                           workers=args.workers, batch_size=rep["batch_size"],
                           alpha_level=cfg.alpha_level)
    d = cfg.loss.d
    names = report.coord_names(d)
    report.write_replications_csv(out / "replications.csv", res.estimates, res.errors, d)
    summary = summarize_replications(res, z_star, names)
    summary["oracle"] = orc
    summary["config"] = cfg.materialized()
    hists = {n: report.fd_histogram(res.errors[:, i]) for i, n in enumerate(names)}
    report.write_ecdf_csv(out / "ecdf.csv", summary["ecdf_error"])
    report.write_epdf_csv(out / "epdf.csv", hists)
    report.write_json(out / "summary.json", summary)
    print(json.dumps(report.to_jsonable({k: summary[k] for k in ("mode", "N", "mean", "std")}
                                        | {"coverage": summary.get("coverage")})))
    return EXIT_OK


def cmd_oracle(cfg: ExperimentConfig, args) -> int:
    orc = resolve_oracle(cfg)
    text = json.dumps(report.to_jsonable(orc), indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text(text)
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "run": cmd_run, "replicate": cmd_replicate, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskalloc",
                                     description="Stochastic root finding for shortfall risk allocations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--workers", type=int, default=1, help="processes for replications")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleCorrelationError, CalibrationError) as exc:
        print(f"infeasible calibration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonFiniteResultError, SingularJacobianError, SAAConvergenceError,
            ReplicationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
