"""Command-line entry point: ``mfpcjm <command> [options]``.

Every command accepts ``--config FILE`` (TOML or JSON).  Top-level keys
mirror the long option names with underscores; ``fit`` additionally reads
the ``model``, ``chain`` and ``quadrature`` tables.  Explicit flags override
file values.

Exit codes: 0 success, 2 usage or configuration error, 3 data or schema
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import LongSurvDataset
from .errors import ConfigError, DomainError, NumericalError, SchemaError
from .evalkit import EvalReport, evaluate_fit, write_report_csv, write_report_json
from .fpca import MfpcBasis, estimate_mfpc_basis
from .jointmodel import (ChainConfig, JointModel, ModelSpec, fit, load_fitted, write_samples_csv,
                         write_summary_json)
from .jointmodel.spec import chain_from_config, quadrature_from_config
from .simgen import build_scenario, load_truth, simulate, true_basis, write_dataset
from .splinekit import LinearTerm
from .study import StudyConfig, parse_basis_mode, run_study, summarize_study

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("mfpcjm")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4

SAMPLES_FILE = "samples.csv"
SUMMARY_FILE = "summary.json"
FIT_ECHO_FILE = "fit.json"


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    """Parse a TOML or JSON config file into a dict."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None


def _resolve(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config value, else ``default``."""
    val = getattr(args, name, None)
    if val is not None:
        return val
    return cfg.get(name, default)


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _markers(value):
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        return tuple(int(v) - 1 for v in value)
    except ValueError:
        raise UsageError(f"markers must be 1-based indices, got {value!r}") from None


def _read_data(directory, t_max=None) -> LongSurvDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise SchemaError(f"data directory {directory} not found")
    echo = directory / "scenario.json"
    if t_max is None and echo.exists():
        t_max = json.loads(echo.read_text()).get("t_max")
    return LongSurvDataset.from_csv(directory, t_max=t_max)


def _default_mean_columns(data) -> list[str]:
    covs = list(data.covariates)
    return ["1", "t", *covs, *(f"t*{c}" for c in covs)]


def _weights(value):
    if value is None or value in ("equal", "inverse-variance", "inverse-integrated-variance"):
        return value or "equal"
    if isinstance(value, str):
        try:
            return np.array([float(v) for v in value.split(",")])
        except ValueError:
            raise UsageError(f"bad weights {value!r}") from None
    return np.asarray(value, dtype=float)


# ------------------------------------------------------------------ commands
def cmd_simulate(args, cfg) -> None:
    seed = _require(_resolve(args, cfg, "seed"), "--seed")
    out = _require(_resolve(args, cfg, "out"), "--out")
    sc = build_scenario(_resolve(args, cfg, "scenario", "I"), _resolve(args, cfg, "n"))
    markers = _markers(_resolve(args, cfg, "markers"))
    if markers is not None:
        sc = sc.select_markers(markers)
    data, _ = simulate(sc, int(seed))
    write_dataset(data, sc, int(seed), out)
    print(f"wrote {data.n} subjects, {data.K} markers, {data.N} observations to {out}")


def cmd_mfpca(args, cfg) -> None:
    data = _read_data(_require(_resolve(args, cfg, "data"), "--data"), _resolve(args, cfg, "t_max"))
    out = _require(_resolve(args, cfg, "out"), "--out")
    cols = _resolve(args, cfg, "mean_columns")
    if isinstance(cols, str):
        cols = [c.strip() for c in cols.split(",")]
    cols = cols or _default_mean_columns(data)
    trim = None if _resolve(args, cfg, "no_trim", False) else float(_resolve(args, cfg, "trim_fraction", 0.1))
    grid = np.linspace(0.0, data.t_max, int(_resolve(args, cfg, "grid_size", 101)))
    basis = estimate_mfpc_basis(
        data, grid=grid, mean_terms=[LinearTerm(tuple(cols))],
        univariate_pve=float(_resolve(args, cfg, "univariate_pve", 0.99)),
        weights=_weights(_resolve(args, cfg, "weights")), trim_fraction=trim,
        min_obs=int(_resolve(args, cfg, "min_obs", 0)),
        marginal_basis_size=int(_resolve(args, cfg, "marginal_basis", 7)),
        pve=_resolve(args, cfg, "pve"))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    basis.to_json(out)
    print(f"wrote basis with M={basis.M} of {basis.M_star} components to {out}")


def _chain(args, cfg) -> ChainConfig:
    chain = chain_from_config(cfg.get("chain"), iterations=args.iterations, burnin=args.burnin,
                              thin=args.thin, seed=args.seed)
    if args.no_standardize:
        chain = replace(chain, standardize=False)
    return chain


def _model(echo: dict, data, basis_path):
    basis = MfpcBasis.from_json(basis_path) if basis_path else None
    spec = ModelSpec.from_config(echo.get("model", {}), data.K, basis, list(data.covariates))
    return spec, basis


def cmd_fit(args, cfg) -> None:
    data_dir = _require(_resolve(args, cfg, "data"), "--data")
    out = Path(_require(_resolve(args, cfg, "out"), "--out"))
    basis_path = _resolve(args, cfg, "basis")
    if basis_path is not None and not Path(basis_path).exists():
        raise SchemaError(f"basis file {basis_path} not found")
    data = _read_data(data_dir, _resolve(args, cfg, "t_max"))
    chain = _chain(args, cfg)
    quad = quadrature_from_config(cfg.get("quadrature"))
    spec, _ = _model(cfg, data, basis_path)
    fitted = fit(spec, data, chain, quad)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(fitted, out / SAMPLES_FILE)
    write_summary_json(fitted, out / SUMMARY_FILE)
    chain_d = asdict(chain)
    if chain_d["sample_blocks"] is not None:
        chain_d["sample_blocks"] = list(chain_d["sample_blocks"])
    echo = {"data": str(Path(data_dir).resolve()), "t_max": data.t_max,
            "basis": None if basis_path is None else str(Path(basis_path).resolve()),
            "model": cfg.get("model", {}), "chain": chain_d,
            "quadrature": {"nodes": quad.nodes, "breakpoints": list(quad.breakpoints)}}
    (out / FIT_ECHO_FILE).write_text(json.dumps(echo, indent=2))
    for msg in fitted.diagnostics:
        log.warning(msg)
    print(f"wrote {fitted.n_samples} draws to {out / SAMPLES_FILE}")


def cmd_evaluate(args, cfg) -> None:
    fit_dir = Path(_require(_resolve(args, cfg, "fit"), "--fit"))
    out = Path(_require(_resolve(args, cfg, "out"), "--out"))
    echo_path = fit_dir / FIT_ECHO_FILE
    if not echo_path.exists():
        raise SchemaError(f"{echo_path} not found")
    echo = json.loads(echo_path.read_text())
    data_dir = _resolve(args, cfg, "data") or echo["data"]
    data = _read_data(data_dir, echo.get("t_max"))
    sc, truth = load_truth(data_dir)
    spec, basis = _model(echo, data, echo.get("basis"))
    chain = chain_from_config(echo.get("chain"))
    model = JointModel(spec, data, quadrature_from_config(echo.get("quadrature")), standardize=chain.standardize)
    fitted = load_fitted(model, fit_dir / SAMPLES_FILE, chain)
    est = tb = None
    if basis is not None:
        tb, est = true_basis(sc, basis.grid), basis
    report = evaluate_fit(truth, fitted, data, grid=sc.grid, true_basis=tb, est_basis=est)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv([report], out / "metrics.csv")
    write_report_json(report, out / "metrics.json")
    _print_metrics(report)


def cmd_replicate_study(args, cfg) -> None:
    seed = _require(_resolve(args, cfg, "seed"), "--seed")
    out = Path(_require(_resolve(args, cfg, "out"), "--out"))
    basis = _resolve(args, cfg, "basis", "true")
    parse_basis_mode(basis)
    chain = chain_from_config({"iterations": 1500, "burnin": 500, "thin": 2, **cfg.get("chain", {})},
                              iterations=args.iterations, burnin=args.burnin, thin=args.thin)
    if args.no_standardize:
        chain = replace(chain, standardize=False)
    study = StudyConfig(
        scenario=str(_resolve(args, cfg, "scenario", "II")), n=_resolve(args, cfg, "n"),
        markers=_markers(_resolve(args, cfg, "markers")),
        replicates=int(_resolve(args, cfg, "replicates", 20)), seed=int(seed), basis=basis, chain=chain,
        quadrature=quadrature_from_config(cfg.get("quadrature")),
        workers=int(_resolve(args, cfg, "workers", 1)),
        univariate_pve=float(_resolve(args, cfg, "univariate_pve", 0.99)),
        weights=_resolve(args, cfg, "weights", "equal"))
    reports = run_study(study)
    agg = summarize_study(reports)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out / "replicates.csv")
    write_report_json(agg, out / "report.json")
    _print_metrics(agg)


def _print_metrics(report: EvalReport) -> None:
    for pred, vals in report.metrics.items():
        print(f"{pred:>14s}  " + "  ".join(f"{k}={v:.4f}" for k, v in vals.items()))


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfpcjm", description="Multivariate functional joint models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON file with default option values")
        sp.add_argument("--out", help="output path")
        return sp

    s = common(sub.add_parser("simulate", help="generate a dataset from a published scenario"))
    s.add_argument("--scenario", choices=["I", "II"])
    s.add_argument("--n", type=int, help="number of subjects")
    s.add_argument("--seed", type=int)
    s.add_argument("--markers", help="comma-separated 1-based marker subset")
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("mfpca", help="estimate an MFPC basis and write it as JSON"))
    s.add_argument("--data", help="directory with survival.csv and longitudinal.csv")
    s.add_argument("--pve", type=float, help="multivariate truncation level (default: keep all)")
    s.add_argument("--univariate-pve", type=float)
    s.add_argument("--weights", help="equal, inverse-variance or comma-separated numbers")
    s.add_argument("--trim-fraction", type=float)
    s.add_argument("--no-trim", action="store_true", default=None)
    s.add_argument("--min-obs", type=int)
    s.add_argument("--marginal-basis", type=int, help="marginal B-splines of the covariance smoother")
    s.add_argument("--grid-size", type=int)
    s.add_argument("--mean-columns", help="comma-separated fixed columns of the marker means")
    s.add_argument("--t-max", type=float)
    s.set_defaults(func=cmd_mfpca)

    def chain_flags(sp):
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--burnin", type=int)
        sp.add_argument("--thin", type=int)
        sp.add_argument("--no-standardize", action="store_true")

    s = common(sub.add_parser("fit", help="fit the joint model by MCMC"))
    s.add_argument("--data")
    s.add_argument("--basis", help="MFPC basis JSON; without it mu has no random effects")
    s.add_argument("--seed", type=int)
    s.add_argument("--t-max", type=float)
    chain_flags(s)
    s.set_defaults(func=cmd_fit)

    s = common(sub.add_parser("evaluate", help="score a fit of simulated data against the truth"))
    s.add_argument("--fit", help="directory written by the fit command")
    s.add_argument("--data", help="dataset directory (default: the one recorded by fit)")
    s.set_defaults(func=cmd_evaluate)

    s = common(sub.add_parser("replicate-study", help="simulate, fit and evaluate many replicates"))
    s.add_argument("--scenario", choices=["I", "II"])
    s.add_argument("--n", type=int)
    s.add_argument("--markers")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--basis", help="true, estimate or truncate:<pve>")
    s.add_argument("--workers", type=int)
    s.add_argument("--univariate-pve", type=float)
    s.add_argument("--weights")
    chain_flags(s)
    s.set_defaults(func=cmd_replicate_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"mfpcjm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DomainError, FileNotFoundError) as exc:
        print(f"mfpcjm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"mfpcjm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
