"""Plot-ready artifacts: CSV tables and audit JSON.

CSV schemas (column order is fixed):

* trajectory: ``step,m_1,...,m_d,lambda,clamped`` where ``clamped`` is a
  bitmask, bit ``j`` set when coordinate ``j`` (0-based, multiplier last)
  was clamped by the projection at that step.
* replications: ``rep,m_1,...,m_d,lambda,D_1,...,D_{d+1}``.
* V_n history: ``step,V_1_1,V_1_2,...`` (upper triangle, row-major).
* ECDF: ``coord,x,F``; EPDF: ``coord,bin_left,bin_right,density``.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy import stats

RESULTS_REQUIRED = {
    "config": dict,
    "final": list,
    "pr_average": (list, type(None)),
    "sigma_n": (list, type(None)),
    "a_n": (list, type(None)),
    "v_n": (list, type(None)),
    "condition_numbers": dict,
    "confidence_intervals": (dict, type(None)),
    "gain_diagnostic": (dict, type(None)),
    "boundary_contacts": list,
    "wall_time_s": float,
}


def coord_names(d: int) -> list[str]:
    return [f"m_{i + 1}" for i in range(d)] + ["lambda"]


def write_trajectory_csv(path, traj, d: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *coord_names(d), "clamped"])
        for k, z, flag in zip(traj.steps, traj.iterates, traj.clamped):
            w.writerow([int(k), *(repr(float(v)) for v in z), int(flag)])


def write_replications_csv(path, estimates, errors, d: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", *coord_names(d), *(f"D_{i + 1}" for i in range(d + 1))])
        for r, z in enumerate(estimates):
            e = errors[r] if errors is not None else [math.nan] * (d + 1)
            w.writerow([r, *(repr(float(v)) for v in z), *(repr(float(v)) for v in e)])


def write_vn_history_csv(path, history, v_fn) -> None:
    rows = []
    for k, sigma, a in history:
        try:
            v = v_fn(sigma, a)
        except np.linalg.LinAlgError:
            v = np.full_like(sigma, np.nan)
        rows.append((k, v))
    if not rows:
        return
    dim = rows[0][1].shape[0]
    iu = np.triu_indices(dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *(f"V_{i + 1}_{j + 1}" for i, j in zip(*iu))])
        for k, v in rows:
            w.writerow([int(k), *(repr(float(x)) for x in v[iu])])


def ecdf_grid(x, points: int = 101) -> dict:
    """Quantile grid of the empirical CDF: ``x`` values at probabilities ``F``."""
    x = np.sort(np.asarray(x, dtype=float))
    probs = np.linspace(0.0, 1.0, points)
    return {"x": np.quantile(x, probs).tolist(), "F": probs.tolist()}


def fd_histogram(x) -> dict:
    """Density histogram with Freedman-Diaconis bins."""
    x = np.asarray(x, dtype=float)
    edges = np.histogram_bin_edges(x, bins="fd")
    dens, edges = np.histogram(x, bins=edges, density=True)
    return {"edges": edges.tolist(), "density": dens.tolist()}


def ks_normal(x) -> dict:
    """KS distance of the standardized sample against the standard normal."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 or x.std(ddof=1) == 0:
        return {"statistic": math.nan, "pvalue": math.nan}
    zs = (x - x.mean()) / x.std(ddof=1)
    res = stats.kstest(zs, "norm")
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue)}


def write_ecdf_csv(path, grids: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coord", "x", "F"])
        for name, g in grids.items():
            for x, f in zip(g["x"], g["F"]):
                w.writerow([name, repr(x), repr(f)])


def write_epdf_csv(path, hists: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coord", "bin_left", "bin_right", "density"])
        for name, h in hists.items():
            e = h["edges"]
            for i, dens in enumerate(h["density"]):
                w.writerow([name, repr(e[i]), repr(e[i + 1]), repr(dens)])


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, payload: dict) -> dict:
    data = to_jsonable(payload)
    Path(path).write_text(json.dumps(data, indent=2, allow_nan=False))
    return data


def validate_results(data: dict) -> dict:
    """Check the results document layout; raises ``ValueError`` on mismatch."""
    for key, kind in RESULTS_REQUIRED.items():
        if key not in data:
            raise ValueError(f"results: missing field {key!r}")
        if not isinstance(data[key], kind):
            raise ValueError(f"results.{key}: unexpected type {type(data[key]).__name__}")
    dim = len(data["final"])
    for key in ("sigma_n", "a_n", "v_n"):
        m = data[key]
        if m is not None and (len(m) != dim or any(len(row) != dim for row in m)):
            raise ValueError(f"results.{key}: expected a {dim}x{dim} matrix")
    if data["pr_average"] is not None and len(data["pr_average"]) != dim:
        raise ValueError("results.pr_average: wrong length")
    if len(data["boundary_contacts"]) != dim:
        raise ValueError("results.boundary_contacts: wrong length")
    return data


def load_results(path) -> dict:
    return validate_results(json.loads(Path(path).read_text()))
