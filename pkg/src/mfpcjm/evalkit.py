"""Bias, rMSE, coverage and eigenfunction errors for simulation studies.

``truth`` objects provide ``eta(label, subject, t)``; ``fit`` objects
provide ``eta_samples(label, subject, t)`` returning ``(draws, rows)``.
The label ``"lambda+gamma"`` denotes the summed survival predictors.

Sign conventions: longitudinal bias is estimate minus truth, survival bias
is truth minus estimate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, SchemaError
from .fpca import MfpcBasis

METRICS = ("bias", "rmse", "coverage")


def _samples(fit, label, subject, t) -> np.ndarray:
    if label == "lambda+gamma":
        return _samples(fit, "lambda", subject, t) + _samples(fit, "gamma", subject, t)
    try:
        s = np.asarray(fit.eta_samples(label, subject, t), dtype=float)
    except KeyError as exc:
        raise ConfigError(f"fit has no samples for {label!r}: {exc}") from None
    if s.ndim != 2 or s.shape[0] == 0:
        raise ConfigError(f"fit has no samples for {label!r}")
    return s


def point_metrics(true, draws, survival: bool = False) -> dict:
    """Bias, rMSE and 95% coverage of posterior means against ``true`` values.

    Parameters
    ----------
    true : ndarray, shape (rows,)
    draws : ndarray, shape (S, rows)
    survival : bool
        Flips the bias sign to truth minus estimate.
    """
    true = np.asarray(true, dtype=float)
    draws = np.asarray(draws, dtype=float)
    est = draws.mean(axis=0)
    err = est - true
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    cover = (lo <= true) & (true <= hi)
    return {"bias": float(-err.mean() if survival else err.mean()),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "coverage": float(cover.mean())}


def longitudinal_bias_rmse_coverage(truth, fit, data) -> dict:
    """Metrics of ``mu_k`` and ``sigma_k`` averaged over all observations."""
    out = {}
    for k in range(data.K):
        subj, t, _ = data.marker_obs(k)
        for head in ("mu", "sigma"):
            label = f"{head}_{k + 1}"
            out[label] = point_metrics(truth.eta(label, subj, t), _samples(fit, label, subj, t))
    return out


def survival_metrics(truth, fit, data) -> dict:
    """Metrics of ``lambda+gamma`` and ``alpha_k`` at the follow-up times."""
    subj = np.arange(data.n)
    T = data.time
    out = {}
    for label in ["lambda+gamma"] + [f"alpha_{k + 1}" for k in range(data.K)]:
        out[label] = point_metrics(truth.eta(label, subj, T), _samples(fit, label, subj, T), survival=True)
    return out


def time_resolved_metrics(truth, fit, data, label: str, grid) -> dict:
    """Metrics at each grid time over the risk set ``{i : T_i >= t}``.

    Returns a dict of arrays (``bias``, ``rmse``, ``coverage``, ``n_risk``);
    entries are NaN where the risk set is empty.
    """
    grid = np.asarray(grid, dtype=float)
    at_risk = data.time[:, None] >= grid[None, :]
    subj, g = np.nonzero(at_risk)
    t = grid[g]
    true = truth.eta(label, subj, t)
    draws = _samples(fit, label, subj, t)
    est = draws.mean(axis=0)
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    err = est - true
    if label == "lambda+gamma" or label.startswith("alpha"):
        signed = -err
    else:
        signed = err
    n_risk = np.bincount(g, minlength=grid.size).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        bias = np.bincount(g, signed, grid.size) / n_risk
        rmse = np.sqrt(np.bincount(g, err ** 2, grid.size) / n_risk)
        cov = np.bincount(g, ((lo <= true) & (true <= hi)).astype(float), grid.size) / n_risk
    return {"bias": bias, "rmse": rmse, "coverage": cov, "n_risk": n_risk}


def mfpc_error(true_basis: MfpcBasis, est_basis: MfpcBasis, weights=None) -> np.ndarray:
    """Squared-norm error per component after resolving the sign."""
    if true_basis.grid.shape != est_basis.grid.shape or np.any(true_basis.grid != est_basis.grid):
        raise SchemaError("bases must share the grid")
    if true_basis.K != est_basis.K:
        raise SchemaError("bases must have the same number of markers")
    ref = true_basis if weights is None else MfpcBasis(
        true_basis.grid, weights, true_basis.eigenfunctions, true_basis.eigenvalues, true_basis.M)
    M = min(true_basis.M, est_basis.M)
    out = np.empty(M)
    for m in range(M):
        a = [true_basis.psi(k)[:, m] for k in range(true_basis.K)]
        b = [est_basis.psi(k)[:, m] for k in range(est_basis.K)]
        minus = [x - y for x, y in zip(a, b)]
        plus = [x + y for x, y in zip(a, b)]
        out[m] = min(float(ref.inner(minus, minus)), float(ref.inner(plus, plus)))
    return out


@dataclass
class EvalReport:
    """Metrics of one replicate (or an aggregate over replicates)."""

    metrics: dict
    time_resolved: dict = field(default_factory=dict)
    mfpc_errors: np.ndarray | None = None
    replicates: int = 1
    extra: dict = field(default_factory=dict)

    def rows(self, replicate: int | None = None) -> list[dict]:
        out = []
        for pred, vals in self.metrics.items():
            for metric, value in vals.items():
                out.append({"predictor": pred, "metric": metric, "value": value, "replicate": replicate})
        if self.mfpc_errors is not None:
            for m, v in enumerate(self.mfpc_errors):
                out.append({"predictor": f"psi_{m + 1}", "metric": "norm_error", "value": float(v),
                            "replicate": replicate})
        return out

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "metrics": self.metrics,
            "mfpc_errors": None if self.mfpc_errors is None else [float(v) for v in self.mfpc_errors],
            "time_resolved": {lab: {k: np.asarray(v).tolist() for k, v in d.items()}
                              for lab, d in self.time_resolved.items()},
            "extra": self.extra,
        }


def evaluate_fit(truth, fit, data, *, grid=None, true_basis=None, est_basis=None,
                 time_resolved: bool = True) -> EvalReport:
    """All metrics for one fitted replicate."""
    metrics = {}
    metrics.update(survival_metrics(truth, fit, data))
    metrics.update(longitudinal_bias_rmse_coverage(truth, fit, data))
    tr = {}
    if time_resolved:
        grid = np.linspace(0.0, data.t_max, 101) if grid is None else grid
        for label in metrics:
            tr[label] = time_resolved_metrics(truth, fit, data, label, grid)
    errs = None
    if true_basis is not None and est_basis is not None:
        errs = mfpc_error(true_basis, est_basis)
    return EvalReport(metrics, tr, errs)


def mean_longitudinal_rmse(report: EvalReport) -> float:
    vals = [v["rmse"] for k, v in report.metrics.items() if k.startswith("mu_")]
    return float(np.mean(vals))


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of every metric over replicates."""
    reports = list(reports)
    if not reports:
        raise ConfigError("nothing to aggregate")
    metrics = {}
    for pred in reports[0].metrics:
        metrics[pred] = {m: float(np.mean([r.metrics[pred][m] for r in reports]))
                         for m in reports[0].metrics[pred]}
    tr = {}
    for lab in reports[0].time_resolved:
        tr[lab] = {k: np.nanmean(np.stack([r.time_resolved[lab][k] for r in reports]), axis=0)
                   for k in reports[0].time_resolved[lab]}
    errs = [r.mfpc_errors for r in reports if r.mfpc_errors is not None]
    mean_err = None
    if errs:
        M = min(len(e) for e in errs)
        mean_err = np.mean([e[:M] for e in errs], axis=0)
    return EvalReport(metrics, tr, mean_err, replicates=len(reports))


def write_report_csv(reports: Sequence[EvalReport], path) -> None:
    """Long format: predictor, metric, value, replicate."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["predictor", "metric", "value", "replicate"])
        w.writeheader()
        for r, rep in enumerate(reports):
            for row in rep.rows(r + 1):
                row["value"] = repr(float(row["value"]))
                w.writerow(row)


def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
