"""Bayesian multivariate joint model with an MFPC random-effects basis."""

from .io import load_fitted, read_samples_csv, summarize, write_samples_csv, write_summary_json
from .mode import (ModeResult, init_smoothing_variance, initialize_variances, newton_block,
                   posterior_mode, regularized_precision)
from .model import (Block, JointModel, StandardizationRecord, cum_hazard, hessian, log_likelihood,
                    score, standardize_survival_designs)
from .quadrature import integrate, nodes_and_weights, refined
from .sampler import FittedModel, fit, ig_full_conditional, mcmc_sample, slice_sample
from .spec import ChainConfig, ModelSpec, PriorConfig, QuadratureConfig

__all__ = [
    "Block", "ChainConfig", "FittedModel", "JointModel", "ModeResult", "ModelSpec", "PriorConfig",
    "QuadratureConfig", "StandardizationRecord", "cum_hazard", "fit", "hessian", "ig_full_conditional",
    "init_smoothing_variance", "initialize_variances", "integrate", "load_fitted", "log_likelihood", "mcmc_sample",
    "newton_block", "nodes_and_weights", "posterior_mode", "refined", "regularized_precision", "score",
    "read_samples_csv", "slice_sample", "standardize_survival_designs", "summarize", "write_samples_csv",
    "write_summary_json",
]
