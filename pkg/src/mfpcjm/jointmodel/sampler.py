"""Metropolis-Hastings with Taylor-expansion proposals, plus variance updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ..errors import EstimationError
from .mode import initialize_variances, posterior_mode, regularized_precision
from .model import JointModel
from .spec import ChainConfig, QuadratureConfig

log = logging.getLogger(__name__)

LOW_ACCEPTANCE = 0.01
ACCEPTANCE_WINDOW = 500


def ig_full_conditional(a: float, b: float, rank: float, quad: float) -> tuple[float, float]:
    """Inverse-gamma full conditional of a variance with ``IG(a, b)`` prior."""
    return a + 0.5 * rank, b + 0.5 * quad


def slice_sample(logf, x0: float, rng, width: float = 1.0, max_steps: int = 50) -> float:
    """One univariate slice-sampling update with stepping out and shrinkage."""
    f0 = logf(x0)
    level = f0 + np.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(np.floor(max_steps * rng.uniform()))
    k = max_steps - 1 - j
    while j > 0 and logf(left) > level:
        left -= width
        j -= 1
    while k > 0 and logf(right) > level:
        right += width
        k -= 1
    while True:
        x1 = rng.uniform(left, right)
        if logf(x1) > level:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-12:
            return x0


def _log_proposal(x, mean, P, L) -> float:
    d = x - mean
    return float(np.sum(np.log(np.diag(L))) - 0.5 * d @ P @ d)


class BlockSampler:
    """Stateful per-block updates on a :class:`JointModel`."""

    def __init__(self, model: JointModel, rng):
        self.model = model
        self.rng = rng
        self.regularized = 0
        self.last_accept_prob: dict[str, float] = {}

    def _proposal(self, name, ev, beta):
        g, H = self.model._derivs(name, ev, beta)
        P, L, reg = regularized_precision(H, name)
        self.regularized += reg
        return beta + linalg.cho_solve((L, True), g), P, L

    def mh_step(self, name: str) -> float:
        """Taylor-proposal MH update; returns the acceptance indicator."""
        m = self.model
        cur = m.current
        beta = m.coef[name]
        mean, P, L = self._proposal(name, cur, beta)
        z = self.rng.standard_normal(beta.size)
        prop = mean + linalg.solve_triangular(L, z, lower=True, trans="T")
        ev = m.evaluate_block(name, prop)
        if not np.isfinite(ev.lp):
            self.last_accept_prob[name] = 0.0
            return 0.0
        mean_r, P_r, L_r = self._proposal(name, ev, prop)
        log_alpha = (ev.lp - cur.lp + _log_proposal(beta, mean_r, P_r, L_r)
                     - _log_proposal(prop, mean, P, L))
        self.last_accept_prob[name] = float(np.exp(min(0.0, log_alpha)))
        if np.log(self.rng.uniform()) < log_alpha:
            m.commit(name, prop, ev)
            return 1.0
        return 0.0

    def rho_step(self, name: str) -> float:
        """Joint proposal for all scores of one component, accepted per subject.

        Target and proposal both factorize over subjects, so independent
        per-subject MH decisions leave the full conditional invariant.
        """
        m = self.model
        cur = m.current
        rho = m.coef[name]
        g, h = m._derivs(name, cur, rho)
        p = -h
        mean = rho + g / p
        prop = mean + self.rng.standard_normal(rho.size) / np.sqrt(p)
        ev = m.evaluate_block(name, prop)
        g_r, h_r = m._derivs(name, ev, prop)
        p_r = -h_r
        mean_r = prop + g_r / p_r
        lp_cur = cur.work["ll_sub"] + m.rho_subject_prior(name, rho)
        lp_new = ev.work["ll_sub"] + m.rho_subject_prior(name, prop)
        log_alpha = (lp_new - lp_cur
                     + 0.5 * np.log(p_r) - 0.5 * p_r * (rho - mean_r) ** 2
                     - 0.5 * np.log(p) + 0.5 * p * (prop - mean) ** 2)
        log_alpha = np.where(np.isfinite(log_alpha), log_alpha, -np.inf)
        accept = np.log(self.rng.uniform(size=rho.size)) < log_alpha
        if accept.all():
            m.commit(name, prop, ev)
        elif accept.any():
            new = np.where(accept, prop, rho)
            m.commit(name, new, m.evaluate_block(name, new))
        return float(accept.mean())

    def variance_step(self, name: str) -> float:
        m = self.model
        b = m.blocks[name]
        beta = m.coef[name]
        rank = b.dim if b.kind == "rho" else b.rank
        quad = float(beta @ beta) if b.kind == "rho" else float(beta @ b.penalty @ beta)
        pri = m.spec.priors
        if pri.variance_prior == "ig":
            a, bb = ig_full_conditional(pri.ig_a, pri.ig_b, rank, quad)
            value = 1.0 / self.rng.gamma(a, 1.0 / bb)
        else:
            A2 = pri.half_cauchy_scale ** 2

            def logf(u):
                # density of u = log tau^2 under a half-Cauchy prior on tau
                return -0.5 * rank * u - 0.5 * quad * np.exp(-u) - np.log1p(np.exp(u) / A2) + 0.5 * u

            value = float(np.exp(slice_sample(logf, np.log(m.tau2[name]), self.rng)))
        value = min(max(value, 1e-300), 1e300)
        m.commit_tau2(name, value)
        return value


@dataclass(eq=False)
class FittedModel:
    """Posterior mode, thinned MCMC samples and diagnostics (natural scale)."""

    mode: dict
    samples: dict
    tau2_samples: dict
    acceptance: dict
    coef_names: dict
    chain: ChainConfig
    quadrature: QuadratureConfig
    standardization: dict
    mode_tau2: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    model: JointModel | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return next(iter(self.samples.values())).shape[0] if self.samples else 0

    def parameter_table(self) -> tuple[list[str], np.ndarray]:
        """Column names and the (draws x parameters) matrix."""
        names, cols = [], []
        for block, arr in self.samples.items():
            names += [f"{block}.{c}" for c in self.coef_names[block]]
            cols.append(arr)
        for block, arr in self.tau2_samples.items():
            names.append(f"tau2.{block}")
            cols.append(arr[:, None])
        return names, np.hstack(cols) if cols else np.zeros((0, 0))

    def posterior_mean(self) -> dict:
        return {k: v.mean(axis=0) for k, v in self.samples.items()}

    def eta_samples(self, label: str, subject, t) -> np.ndarray:
        """Draws of predictor ``label`` at (subject, time) pairs, shape (S, rows)."""
        m = self.model
        subject = np.asarray(subject, dtype=int)
        t = np.asarray(t, dtype=float)
        out = np.zeros((self.n_samples, t.size))
        for name, b in m.blocks.items():
            if b.label == label:
                out += self.samples[name] @ b.built.evaluate(subject, t).T
        if label.startswith("mu_") and m.spec.mfpc_basis is not None:
            k = int(label.split("_")[1]) - 1
            psi = m.spec.mfpc_basis.evaluate(k, t)
            for j in range(psi.shape[1]):
                out += self.samples[f"rho_{j + 1}"][:, subject] * psi[:, j]
        return out


def mcmc_sample(model: JointModel, chain: ChainConfig = ChainConfig(), rng=None) -> FittedModel:
    """Run the blockwise sampler from the model's current state.

    Returns thinned post-burn-in draws on the natural coefficient scale.
    """
    rng = np.random.default_rng(chain.seed) if rng is None else rng
    names = list(chain.sample_blocks) if chain.sample_blocks is not None else model.block_names()
    unknown = set(names) - set(model.blocks)
    if unknown:
        raise EstimationError(f"unknown blocks in sample_blocks: {sorted(unknown)}")
    if not np.isfinite(model.log_posterior()):
        raise EstimationError("starting state has non-finite log-posterior")
    sampler = BlockSampler(model, rng)
    S = chain.n_samples
    samples = {n: np.empty((S, model.blocks[n].dim)) for n in model.blocks}
    tau2_samples = {n: np.empty(S) for n in model.tau2}
    accepted = {n: 0.0 for n in names}
    window = {n: 0.0 for n in names}
    diagnostics = []
    mode_nat = model.to_natural(model.coef)
    mode_tau2 = dict(model.tau2)
    s = 0
    for it in range(chain.iterations):
        for name in names:
            b = model.blocks[name]
            a = sampler.rho_step(name) if b.kind == "rho" else sampler.mh_step(name)
            accepted[name] += a
            window[name] += a
            if chain.update_variances and b.penalized:
                sampler.variance_step(name)
        if (it + 1) % ACCEPTANCE_WINDOW == 0:
            for name in names:
                rate = window[name] / ACCEPTANCE_WINDOW
                if rate < LOW_ACCEPTANCE:
                    msg = f"block {name}: acceptance {rate:.3f} over iterations {it + 2 - ACCEPTANCE_WINDOW}-{it + 1}"
                    log.warning(msg)
                    diagnostics.append(msg)
                window[name] = 0.0
        if it >= chain.burnin and (it - chain.burnin) % chain.thin == 0:
            nat = model.to_natural(model.coef)
            for n in samples:
                samples[n][s] = nat[n]
            for n in tau2_samples:
                tau2_samples[n][s] = model.tau2[n]
            s += 1
    if sampler.regularized:
        diagnostics.append(f"proposal precision regularized {sampler.regularized} times")
    return FittedModel(
        mode=mode_nat, samples=samples, tau2_samples=tau2_samples,
        acceptance={n: accepted[n] / chain.iterations for n in names},
        coef_names={n: b.coef_names for n, b in model.blocks.items()},
        chain=chain, quadrature=model.quadrature,
        standardization={n: b.A for n, b in model.blocks.items() if b.A is not None},
        mode_tau2=mode_tau2, diagnostics=diagnostics, model=model)


def fit(spec, data, chain: ChainConfig = ChainConfig(), quadrature: QuadratureConfig = QuadratureConfig(),
        init: dict | None = None) -> FittedModel:
    """Initialize, find the posterior mode, then sample."""
    model = JointModel(spec, data, quadrature, standardize=chain.standardize)
    model.initialize()
    if init:
        model.set_state(model.from_natural(init))
    initialize_variances(model)
    posterior_mode(model, chain)
    return mcmc_sample(model, chain)
