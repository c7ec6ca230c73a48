"""Export of posterior samples (CSV) and summaries (JSON)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from .model import JointModel
from .sampler import FittedModel
from .spec import ChainConfig


def write_samples_csv(fitted: FittedModel, path) -> list[str]:
    """One column per scalar parameter, one row per retained draw."""
    names, table = fitted.parameter_table()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    return names


def read_samples_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader, None)
        if not names:
            raise SchemaError(f"{path}: empty file")
        rows = []
        for r, rec in enumerate(reader, start=2):
            if len(rec) != len(names):
                raise SchemaError(f"{path}: row {r} has {len(rec)} fields, expected {len(names)}")
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                c = next(c for c, v in enumerate(rec) if not _is_float(v))
                raise SchemaError(f"{path}: row {r}, column {names[c]!r}: not a number: {rec[c]!r}") from None
    return names, np.array(rows).reshape(len(rows), len(names))


def _is_float(v) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def summarize(fitted: FittedModel, include_scores: bool = False) -> dict:
    """Posterior mean and 2.5/97.5% quantiles per parameter, plus acceptance rates."""
    names, table = fitted.parameter_table()
    params = {}
    for j, name in enumerate(names):
        if not include_scores and name.startswith("rho_"):
            continue
        col = table[:, j]
        params[name] = {"mean": float(col.mean()),
                        "q2.5": float(np.quantile(col, 0.025)),
                        "q97.5": float(np.quantile(col, 0.975))}
    return {
        "n_samples": fitted.n_samples,
        "chain": {"iterations": fitted.chain.iterations, "burnin": fitted.chain.burnin,
                  "thin": fitted.chain.thin, "seed": fitted.chain.seed},
        "acceptance": {k: float(v) for k, v in fitted.acceptance.items()},
        "parameters": params,
        "diagnostics": list(fitted.diagnostics),
    }


def write_summary_json(fitted: FittedModel, path, include_scores: bool = False) -> dict:
    summary = summarize(fitted, include_scores)
    Path(path).write_text(json.dumps(summary, indent=2))
    return summary


def load_fitted(model: JointModel, path, chain: ChainConfig | None = None) -> FittedModel:
    """Rebuild a :class:`FittedModel` from a samples CSV written for ``model``.

    Column names must match the model's parameter layout exactly.
    """
    names, table = read_samples_csv(path)
    samples, tau2, expected, j = {}, {}, [], 0
    for name, b in model.blocks.items():
        expected += [f"{name}.{c}" for c in b.coef_names]
        samples[name] = table[:, j:j + b.dim]
        j += b.dim
    for name in model.tau2:
        expected.append(f"tau2.{name}")
        tau2[name] = table[:, j] if j < table.shape[1] else np.empty(0)
        j += 1
    if names != expected:
        bad = next((i for i, (a, e) in enumerate(zip(names, expected)) if a != e), min(len(names), len(expected)))
        raise SchemaError(f"{path}: column {bad + 1} does not match the model "
                          f"(expected {len(expected)} columns, found {len(names)})")
    return FittedModel(
        mode={}, samples=samples, tau2_samples=tau2, acceptance={},
        coef_names={n: b.coef_names for n, b in model.blocks.items()},
        chain=chain or ChainConfig(), quadrature=model.quadrature, standardization={}, model=model)
