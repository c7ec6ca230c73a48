"""Blockwise Newton-Raphson posterior mode and variance initialization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ..errors import OptimizationError
from .model import JointModel
from .spec import ChainConfig, split_label

log = logging.getLogger(__name__)


def regularized_precision(H, context: str = ""):
    """Cholesky factor of ``-H``, flooring eigenvalues when it is not PD.

    Returns
    -------
    P : ndarray
        Proposal precision actually used.
    L : ndarray
        Lower Cholesky factor of ``P``.
    regularized : bool
    """
    P = -0.5 * (H + H.T)
    try:
        return P, linalg.cholesky(P, lower=True), False
    except linalg.LinAlgError:
        pass
    vals, vecs = linalg.eigh(P)
    top = max(np.max(np.abs(vals)), 1e-8)
    floor = 1e-6 * top
    vals = np.maximum(vals, floor)
    P = (vecs * vals) @ vecs.T
    P = 0.5 * (P + P.T)
    log.debug("precision of %s not positive definite; eigenvalues floored at %.3g", context, floor)
    return P, linalg.cholesky(P, lower=True), True


def edf(X, K, tau2: float) -> float:
    """Effective degrees of freedom ``tr((X'X + K/tau2)^-1 X'X)``."""
    XtX = X.T @ X
    A = XtX + K / tau2
    return float(np.trace(linalg.solve(A + 1e-10 * np.eye(len(A)) * np.trace(A) / len(A), XtX, assume_a="sym")))


def init_smoothing_variance(X, K, target: float | None = None, bounds=(-20.0, 20.0)) -> float:
    """Variance giving ``target`` effective degrees of freedom (bisection on log tau^2).

    The default target is ``min(5, dim / 2)``.  Targets outside the
    attainable range return the corresponding bound.
    """
    dim = K.shape[0]
    target = min(5.0, dim / 2) if target is None else float(target)
    lo, hi = bounds
    if edf(X, K, np.exp(lo)) >= target:
        return float(np.exp(lo))
    if edf(X, K, np.exp(hi)) <= target:
        return float(np.exp(hi))
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if edf(X, K, np.exp(mid)) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-8:
            break
    return float(np.exp(0.5 * (lo + hi)))


def initialize_variances(model: JointModel) -> dict:
    """Smooth-term variances by the degrees-of-freedom rule, score variances by ``nu_m``."""
    tau2 = {}
    for name, b in model.blocks.items():
        if b.kind == "smooth":
            X = b.X["obs"] if "obs" in b.X else b.X["T"]
            tau2[name] = init_smoothing_variance(X, b.penalty)
        elif b.kind == "rho":
            tau2[name] = float(model.spec.mfpc_basis.nu[b.m])
    model.set_state(tau2=tau2)
    return tau2


@dataclass
class ModeResult:
    coef: dict
    log_posterior: float
    cycles: int
    converged: bool
    trace: list = field(default_factory=list)


def _step_size(model: JointModel, name: str, chain: ChainConfig) -> float:
    head, _ = split_label(model.blocks[name].label)
    return chain.survival_step if head in ("lambda", "gamma") else 1.0


def newton_block(model: JointModel, name: str, step: float = 1.0, max_halvings: int = 30) -> bool:
    """One damped Newton update of block ``name``; returns whether it moved."""
    cur = model.current
    beta = model.coef[name]
    g, H = model._derivs(name, cur, beta)
    if H.ndim == 1:
        direction = g / np.maximum(-H, 1e-12)
    else:
        P, L, _ = regularized_precision(H, name)
        direction = linalg.cho_solve((L, True), g)
    for _ in range(max_halvings):
        prop = beta + step * direction
        ev = model.evaluate_block(name, prop)
        if ev.lp >= cur.lp:
            model.commit(name, prop, ev)
            return True
        step *= 0.5
    return False


def posterior_mode(model: JointModel, chain: ChainConfig = ChainConfig(), init: dict | None = None,
                   blocks=None) -> ModeResult:
    """Cycle Newton updates over blocks until the log-posterior stabilizes.

    Variances stay fixed at their current values.

    Raises
    ------
    OptimizationError
        If the log-posterior decreases over 10 consecutive cycles or is not finite.
    """
    if init is not None:
        model.set_state(init)
    names = list(blocks) if blocks is not None else model.block_names()
    lp = model.log_posterior()
    if not np.isfinite(lp):
        raise OptimizationError("log-posterior is not finite at the starting values", [lp])
    trace = [lp]
    decreasing = 0
    converged = False
    cycle = 0
    for cycle in range(1, chain.max_cycles + 1):
        for name in names:
            newton_block(model, name, _step_size(model, name, chain))
        new = model.log_posterior()
        trace.append(new)
        if not np.isfinite(new):
            raise OptimizationError("log-posterior became non-finite", trace)
        decreasing = decreasing + 1 if new < lp else 0
        if decreasing >= 10:
            raise OptimizationError("log-posterior decreased for 10 consecutive cycles", trace)
        rel = abs(new - lp) / max(abs(lp), 1e-12)
        lp = new
        if rel < chain.tol:
            converged = True
            break
    if not converged:
        log.warning("posterior mode not converged after %d cycles", cycle)
    return ModeResult({k: v.copy() for k, v in model.coef.items()}, lp, cycle, converged, trace)
