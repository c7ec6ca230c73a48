"""Joint likelihood, block scores and Hessians of the multivariate joint model.

Predictors are evaluated at four kinds of sites:

``T``      follow-up times, one row per subject
``nodes``  quadrature nodes on ``[0, T_i]``, subject-major
``sub``    subject level (baseline predictor ``gamma``)
``obs``    longitudinal observation times of one marker

Every coefficient belongs to exactly one block: one block per term for
linear and smooth terms, and one block ``rho_m`` per MFPC component holding
the n scores of that component.  All per-block derivatives have the generic
form ``sum_sites X' g`` and ``sum_sites X' diag(h) X``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DomainError, NumericalError
from ..splinekit import LinearTerm, MfpcTerm, SmoothTerm, build_term
from .quadrature import nodes_and_weights
from .spec import ModelSpec, QuadratureConfig, split_label

log = logging.getLogger(__name__)

_LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class StandardizationRecord:
    """``X_std = X @ A``; natural coefficients are ``A @ beta_std``."""

    mean: np.ndarray
    scale: np.ndarray
    centered: bool
    A: np.ndarray

    @property
    def identity(self) -> bool:
        return bool(np.all(self.A == np.eye(self.A.shape[0])))


def standardize_survival_designs(design, rows=None):
    """Centre and scale the columns of a fixed-effect survival design.

    Constant columns are left untouched.  Columns are centred only when a
    constant column exists to absorb the shift, otherwise only scaled.

    Parameters
    ----------
    design : ndarray, shape (rows, p)
    rows : ndarray, optional
        Reference rows for the moments (default: all of ``design``).

    Returns
    -------
    ndarray
        Standardized design ``design @ record.A``.
    StandardizationRecord
    """
    X = np.asarray(design, dtype=float)
    ref = X if rows is None else np.asarray(rows, dtype=float)
    p = X.shape[1]
    mean = ref.mean(axis=0)
    sd = ref.std(axis=0)
    const = np.all(ref == ref[:1], axis=0)
    const_idx = np.flatnonzero(const & (ref[0] != 0))
    tiny = sd <= 1e-12 * np.maximum(np.abs(mean), 1.0)
    flagged = ~const & tiny
    if np.any(flagged):
        log.warning("columns %s have (near) zero variance and are left unscaled", np.flatnonzero(flagged).tolist())
    target = ~const & ~tiny
    centered = const_idx.size > 0
    A = np.eye(p)
    scale = np.ones(p)
    shift = np.zeros(p)
    for j in np.flatnonzero(target):
        scale[j] = sd[j]
        A[j, j] = 1.0 / sd[j]
        if centered:
            c = const_idx[0]
            shift[j] = mean[j]
            A[c, j] = -mean[j] / (sd[j] * ref[0, c])
    rec = StandardizationRecord(shift, scale, centered, A)
    return X @ A, rec


@dataclass(eq=False)
class Block:
    """One sampled coefficient block."""

    name: str
    kind: str                       # "linear" | "smooth" | "rho"
    label: str                      # predictor label, "rho" for scores
    dim: int
    coef_names: tuple
    X: dict = field(default_factory=dict)
    penalty: np.ndarray | None = None
    rank: int = 0
    prior_prec: np.ndarray | None = None
    A: np.ndarray | None = None
    built: object = None
    m: int | None = None
    psi: dict = field(default_factory=dict)

    @property
    def penalized(self) -> bool:
        return self.kind in ("smooth", "rho")

    def to_natural(self, beta):
        return beta if self.A is None else self.A @ beta

    def from_natural(self, beta):
        return beta if self.A is None else np.linalg.solve(self.A, beta)


@dataclass(eq=False)
class Evaluation:
    """Log-posterior pieces at one state."""

    eta: dict
    work: dict
    lp: float


class JointModel:
    """The joint model bound to a dataset.

    Parameters
    ----------
    spec : ModelSpec
    data : LongSurvDataset
    quadrature : QuadratureConfig
    standardize : bool
        Standardize fixed-effect survival designs (lambda and gamma).  All
        coefficient arguments and return values of the model are then on
        the standardized scale; use :meth:`to_natural`.
    """

    def __init__(self, spec: ModelSpec, data, quadrature: QuadratureConfig = QuadratureConfig(),
                 standardize: bool = False):
        if spec.K != data.K:
            raise ConfigError(f"spec has {spec.K} markers, data has {data.K}")
        self.spec = spec
        self.data = data
        self.quadrature = quadrature
        self.survival = spec.survival
        self.standardize = standardize
        self.n, self.K = data.n, data.K
        self.delta = data.event.astype(float)
        self.T = data.time
        s, w = nodes_and_weights(self.T, quadrature)
        self.Q = s.shape[1]
        self.node_t = s.ravel()
        self.node_w = w.ravel()
        self.node_subj = np.repeat(np.arange(self.n), self.Q)
        self.sub = np.arange(self.n)
        self.obs = [data.marker_obs(k) for k in range(self.K)]
        self.blocks: dict[str, Block] = {}
        self._build_blocks()
        self.coef = {b.name: np.zeros(b.dim) for b in self.blocks.values()}
        self.tau2 = {b.name: 1.0 for b in self.blocks.values() if b.penalized}
        if spec.mfpc_basis is not None:
            for m in range(spec.mfpc_basis.M):
                self.tau2[f"rho_{m + 1}"] = float(spec.mfpc_basis.nu[m])
        self._current: Evaluation | None = None

    # ------------------------------------------------------------ building
    def _sites(self, label):
        head, k = split_label(label)
        if head in ("lambda", "alpha"):
            return {"T": (self.sub, self.T), "nodes": (self.node_subj, self.node_t)}
        if head == "gamma":
            return {"sub": (self.sub, self.T)}
        subj, t, _ = self.obs[k]
        sites = {"obs": (subj, t)}
        if head == "mu" and self.survival:
            sites.update(T=(self.sub, self.T), nodes=(self.node_subj, self.node_t))
        return sites

    def _build_blocks(self):
        spec, data = self.spec, self.data
        fixed_prec = 1.0 / spec.priors.fixed_sd ** 2
        for label, terms in spec.predictors.items():
            head, k = split_label(label)
            sites = self._sites(label)
            center_rows = sites.get("obs", (self.sub, self.T))
            n_terms = sum(not isinstance(t, MfpcTerm) for t in terms)
            for h, term in enumerate(terms):
                if isinstance(term, MfpcTerm):
                    continue
                if head == "gamma" and (isinstance(term, SmoothTerm) and term.var == "t"
                                        or isinstance(term, LinearTerm)
                                        and any("t" in c.split("*") for c in term.columns)):
                    raise ConfigError("gamma is subject level and cannot depend on t")
                bt = build_term(term, data, label, h, center_rows=center_rows)
                X = {site: bt.evaluate(s, t) for site, (s, t) in sites.items()}
                name = f"{label}.{term.name}" if n_terms > 1 else label
                blk = Block(name, "smooth" if isinstance(term, SmoothTerm) else "linear", label, bt.dim,
                            bt.coef_names, X, bt.penalty, bt.rank, built=bt)
                if blk.kind == "linear":
                    blk.prior_prec = fixed_prec * np.eye(bt.dim)
                    if self.standardize and head in ("lambda", "gamma"):
                        ref_site = "sub" if head == "gamma" else "T"
                        _, rec = standardize_survival_designs(X[ref_site])
                        if not rec.identity:
                            blk.A = rec.A
                            blk.X = {site: Xs @ rec.A for site, Xs in X.items()}
                            blk.prior_prec = fixed_prec * rec.A.T @ rec.A
                if blk.name in self.blocks:
                    raise ConfigError(f"duplicate block {blk.name!r}")
                self.blocks[blk.name] = blk
        basis = spec.mfpc_basis
        if basis is not None:
            psi = {}
            for k in range(self.K):
                sites = self._sites(f"mu_{k + 1}")
                try:
                    psi[k] = {site: basis.evaluate(k, t) for site, (_, t) in sites.items()}
                except DomainError as exc:
                    raise DomainError(f"mu_{k + 1}: {exc}") from None
            ids = tuple(str(i) for i in data.ids)
            for m in range(basis.M):
                self.blocks[f"rho_{m + 1}"] = Block(
                    f"rho_{m + 1}", "rho", "rho", self.n, ids, m=m,
                    psi={k: {site: v[:, m] for site, v in psi[k].items()} for k in psi})

    # ------------------------------------------------------------ parameters
    def block_names(self) -> list[str]:
        return list(self.blocks)

    def labels(self) -> list[str]:
        return list(self.spec.predictors)

    def to_natural(self, coef: dict) -> dict:
        return {name: self.blocks[name].to_natural(np.asarray(v)) for name, v in coef.items()}

    def from_natural(self, coef: dict) -> dict:
        return {name: self.blocks[name].from_natural(np.asarray(v, dtype=float)) for name, v in coef.items()}

    def set_state(self, coef: dict | None = None, tau2: dict | None = None) -> None:
        """Replace (part of) the coefficients / variances and refresh caches."""
        if coef:
            for name, v in coef.items():
                if name not in self.blocks:
                    raise ConfigError(f"unknown block {name!r}")
                v = np.array(v, dtype=float).reshape(-1)
                if v.size != self.blocks[name].dim:
                    raise ConfigError(f"block {name!r} needs {self.blocks[name].dim} coefficients")
                self.coef[name] = v
        if tau2:
            for name, v in tau2.items():
                if name not in self.tau2:
                    raise ConfigError(f"block {name!r} has no variance parameter")
                if not v > 0:
                    raise DomainError(f"variance of {name!r} must be positive")
                self.tau2[name] = float(v)
        self._current = None

    def initialize(self) -> None:
        """Zero coefficients with data-driven intercepts."""
        coef = {name: np.zeros(b.dim) for name, b in self.blocks.items()}
        for name, b in self.blocks.items():
            if b.kind != "linear" or "(Intercept)" not in b.coef_names:
                continue
            j = b.coef_names.index("(Intercept)")
            head, k = split_label(b.label)
            if head == "mu" and self.obs[k][2].size:
                value = float(np.mean(self.obs[k][2]))
            elif head == "sigma" and self.obs[k][2].size > 1:
                value = float(np.log(max(np.std(self.obs[k][2]), 1e-3)))
            elif head == "gamma":
                value = float(np.log(max(self.delta.sum(), 0.5) / self.T.sum()))
            else:
                continue
            # standardization leaves the intercept column unchanged
            coef[name][j] = value
        self.set_state(coef)

    # ------------------------------------------------------------ predictors
    def _eta_from_coef(self, coef) -> dict:
        eta: dict = {}
        for label in self.spec.predictors:
            eta[label] = {site: np.zeros(len(s)) for site, (s, _) in self._sites(label).items()}
        for name, b in self.blocks.items():
            for label, sites in self._block_delta(b, coef[name]).items():
                for site, v in sites.items():
                    eta[label][site] = eta[label][site] + v
        return eta

    def _block_delta(self, b: Block, beta) -> dict:
        if b.kind != "rho":
            return {b.label: {site: X @ beta for site, X in b.X.items()}}
        out = {}
        for k, ps in b.psi.items():
            d = {"obs": ps["obs"] * beta[self.obs[k][0]]}
            if "T" in ps:
                d["T"] = ps["T"] * beta
                d["nodes"] = ps["nodes"] * beta[self.node_subj]
            out[f"mu_{k + 1}"] = d
        return out

    def _shift_eta(self, eta, b: Block, delta) -> dict:
        new = dict(eta)
        for label, sites in self._block_delta(b, delta).items():
            new[label] = {site: eta[label][site] + sites.get(site, 0.0) for site in eta[label]}
        return new

    def predictor_at(self, label: str, subject, t, coef: dict | None = None) -> np.ndarray:
        """Evaluate predictor ``label`` at arbitrary (subject, time) pairs.

        ``coef`` holds natural-scale coefficients (default: current state).
        """
        subject = np.asarray(subject, dtype=int)
        t = np.asarray(t, dtype=float)
        nat = coef if coef is not None else self.to_natural(self.coef)
        out = np.zeros(t.shape[0])
        for name, b in self.blocks.items():
            if b.label == label:
                out += b.built.evaluate(subject, t) @ nat[name]
        head, k = split_label(label)
        if head == "mu" and self.spec.mfpc_basis is not None:
            psi = self.spec.mfpc_basis.evaluate(k, t)
            for m in range(psi.shape[1]):
                out += psi[:, m] * nat[f"rho_{m + 1}"][subject]
        return out

    # ------------------------------------------------------------ likelihood
    def _work(self, eta) -> dict:
        with np.errstate(over="ignore", invalid="ignore"):
            w: dict = {"r": [], "p": []}
            ll_sub = np.zeros(self.n)
            ll_long = np.zeros(self.K)
            for k in range(self.K):
                subj, _, y = self.obs[k]
                r = y - eta[f"mu_{k + 1}"]["obs"]
                sig = eta[f"sigma_{k + 1}"]["obs"]
                p = np.exp(-2 * sig)
                ll = -0.5 * _LOG2PI - sig - 0.5 * r * r * p
                w["r"].append(r)
                w["p"].append(p)
                ll_long[k] = ll.sum()
                ll_sub += np.bincount(subj, ll, minlength=self.n)
            ll_surv = 0.0
            if self.survival:
                lin_n = eta["lambda"]["nodes"].copy()
                lin_T = eta["lambda"]["T"] + eta["gamma"]["sub"]
                for k in range(self.K):
                    a, mu = eta[f"alpha_{k + 1}"], eta[f"mu_{k + 1}"]
                    lin_n += a["nodes"] * mu["nodes"]
                    lin_T += a["T"] * mu["T"]
                W = np.exp(eta["gamma"]["sub"][self.node_subj] + lin_n) * self.node_w
                Wsum = W.reshape(self.n, self.Q).sum(axis=1)
                surv_sub = self.delta * lin_T - Wsum
                ll_sub += surv_sub
                ll_surv = surv_sub.sum()
                w["W"], w["Wsum"] = W, Wsum
            w["ll_sub"] = ll_sub
            w["ll_long"] = ll_long
            w["ll_surv"] = ll_surv
            w["ll"] = ll_long.sum() + ll_surv
        return w

    def _log_prior(self, coef) -> float:
        lp = 0.0
        for name, b in self.blocks.items():
            beta = coef[name]
            if b.kind == "linear":
                lp -= 0.5 * beta @ b.prior_prec @ beta
            else:
                t2 = self.tau2[name]
                quad = beta @ beta if b.kind == "rho" else beta @ b.penalty @ beta
                rank = b.dim if b.kind == "rho" else b.rank
                lp += -0.5 * rank * np.log(t2) - 0.5 * quad / t2
                lp += self._log_variance_prior(t2)
        return lp

    def _log_variance_prior(self, t2: float) -> float:
        pri = self.spec.priors
        if pri.variance_prior == "ig":
            return -(pri.ig_a + 1) * np.log(t2) - pri.ig_b / t2
        # half-Cauchy on tau, expressed as a density of tau^2
        return -np.log1p(t2 / pri.half_cauchy_scale ** 2) - 0.5 * np.log(t2)

    def _evaluate(self, coef, eta=None) -> Evaluation:
        eta = self._eta_from_coef(coef) if eta is None else eta
        work = self._work(eta)
        lp = work["ll"] + self._log_prior(coef)
        if not np.isfinite(lp):
            lp = -np.inf
        return Evaluation(eta, work, float(lp))

    @property
    def current(self) -> Evaluation:
        if self._current is None:
            self._current = self._evaluate(self.coef)
        return self._current

    def _check_finite(self, ev: Evaluation):
        if np.isfinite(ev.work["ll"]):
            return
        for label, sites in ev.eta.items():
            for site, v in sites.items():
                if not np.all(np.isfinite(v)):
                    raise NumericalError(f"non-finite values in predictor {label!r} at {site} sites")
        raise NumericalError("log-likelihood is not finite (hazard overflow)")

    def log_likelihood_parts(self) -> tuple[float, float]:
        """``(l_surv, l_long)`` at the current state."""
        ev = self.current
        self._check_finite(ev)
        return float(ev.work["ll_surv"]), float(ev.work["ll_long"].sum())

    def log_likelihood(self) -> float:
        ev = self.current
        self._check_finite(ev)
        return float(ev.work["ll"])

    def log_posterior(self) -> float:
        return self.current.lp

    def cum_hazard(self, subject: int, upper: float) -> float:
        """``Lambda_i(upper)`` by the configured Gauss-Legendre rule."""
        if not self.survival:
            raise ConfigError("model has no survival part")
        if not 0 < upper <= self.data.t_max * (1 + 1e-12):
            raise DomainError(f"upper limit {upper} outside (0, t_max]")
        s, w = nodes_and_weights(np.array([upper]), self.quadrature)
        s, w = s[0], w[0]
        sub = np.full(s.size, subject)
        eta = self.predictor_at("lambda", sub, s) + self.predictor_at("gamma", sub, s)
        for k in range(self.K):
            eta += self.predictor_at(f"alpha_{k + 1}", sub, s) * self.predictor_at(f"mu_{k + 1}", sub, s)
        return float(np.sum(np.exp(eta) * w))

    # ------------------------------------------------------------ derivatives
    def _site_terms(self, b: Block, ev: Evaluation):
        """``(X, g, h)`` triples of the likelihood part; ``h`` may be None."""
        eta, w = ev.eta, ev.work
        head, k = split_label(b.label)
        X = b.X
        if head == "lambda":
            return [(X["T"], self.delta, None), (X["nodes"], -w["W"], -w["W"])]
        if head == "gamma":
            return [(X["sub"], self.delta - w["Wsum"], -w["Wsum"])]
        if head == "alpha":
            mu = eta[f"mu_{k + 1}"]
            return [(X["T"], self.delta * mu["T"], None),
                    (X["nodes"], -w["W"] * mu["nodes"], -w["W"] * mu["nodes"] ** 2)]
        r, p = w["r"][k], w["p"][k]
        if head == "sigma":
            return [(X["obs"], -1.0 + r * r * p, -2.0 * r * r * p)]
        out = [(X["obs"], r * p, -p)]
        if self.survival:
            a = eta[f"alpha_{k + 1}"]
            out += [(X["T"], self.delta * a["T"], None),
                    (X["nodes"], -w["W"] * a["nodes"], -w["W"] * a["nodes"] ** 2)]
        return out

    def _rho_terms(self, b: Block, ev: Evaluation):
        """Per-subject likelihood gradient and Hessian diagonal of ``rho_m``."""
        eta, w = ev.eta, ev.work
        g = np.zeros(self.n)
        h = np.zeros(self.n)
        # d eta_surv / d rho_im at the nodes, summed over markers
        slope = np.zeros(self.node_t.size) if self.survival else None
        for k, ps in b.psi.items():
            subj = self.obs[k][0]
            r, p = w["r"][k], w["p"][k]
            g += np.bincount(subj, ps["obs"] * r * p, minlength=self.n)
            h -= np.bincount(subj, ps["obs"] ** 2 * p, minlength=self.n)
            if self.survival:
                a = eta[f"alpha_{k + 1}"]
                g += self.delta * a["T"] * ps["T"]
                slope += a["nodes"] * ps["nodes"]
        if self.survival:
            ws = w["W"] * slope
            g -= ws.reshape(self.n, self.Q).sum(axis=1)
            h -= (ws * slope).reshape(self.n, self.Q).sum(axis=1)
        return g, h

    def _derivs(self, name: str, ev: Evaluation, beta, hessian=True):
        """Log-posterior gradient and Hessian of block ``name``.

        For ``rho`` blocks the Hessian is returned as its diagonal.
        """
        b = self.blocks[name]
        if b.kind == "rho":
            g, h = self._rho_terms(b, ev)
            t2 = self.tau2[name]
            return g - beta / t2, h - 1.0 / t2
        grad = np.zeros(b.dim)
        H = np.zeros((b.dim, b.dim)) if hessian else None
        for X, g, h in self._site_terms(b, ev):
            grad += X.T @ g
            if hessian and h is not None:
                H += X.T @ (X * h[:, None])
        if b.kind == "linear":
            grad -= b.prior_prec @ beta
            if hessian:
                H -= b.prior_prec
        else:
            t2 = self.tau2[name]
            grad -= b.penalty @ beta / t2
            if hessian:
                H -= b.penalty / t2
        if hessian:
            H = 0.5 * (H + H.T)
        return grad, H

    def score(self, name: str) -> np.ndarray:
        """Gradient of the log-posterior w.r.t. block ``name`` at the current state."""
        if name not in self.blocks:
            raise ConfigError(f"unknown block {name!r}")
        ev = self.current
        self._check_finite(ev)
        return self._derivs(name, ev, self.coef[name], hessian=False)[0]

    def hessian(self, name: str) -> np.ndarray:
        """Block Hessian of the log-posterior (dense; diagonal for ``rho`` blocks)."""
        if name not in self.blocks:
            raise ConfigError(f"unknown block {name!r}")
        ev = self.current
        self._check_finite(ev)
        H = self._derivs(name, ev, self.coef[name])[1]
        return np.diag(H) if H.ndim == 1 else H

    def evaluate_block(self, name: str, beta) -> Evaluation:
        """Evaluation with block ``name`` replaced by ``beta`` (state untouched)."""
        b = self.blocks[name]
        beta = np.asarray(beta, dtype=float)
        cur = self.current
        eta = self._shift_eta(cur.eta, b, beta - self.coef[name])
        work = self._work(eta)
        coef = dict(self.coef)
        coef[name] = beta
        lp = work["ll"] + self._log_prior(coef)
        return Evaluation(eta, work, float(lp) if np.isfinite(lp) else -np.inf)

    def commit(self, name: str, beta, ev: Evaluation) -> None:
        self.coef[name] = np.asarray(beta, dtype=float)
        self._current = ev

    def commit_tau2(self, name: str, value: float) -> None:
        """Change one variance; only the prior part of the cache changes."""
        cur = self._current
        self.tau2[name] = float(value)
        if cur is not None:
            self._current = Evaluation(cur.eta, cur.work, float(cur.work["ll"] + self._log_prior(self.coef)))

    def rho_subject_prior(self, name: str, beta) -> np.ndarray:
        t2 = self.tau2[name]
        return -0.5 * np.log(t2) - 0.5 * beta ** 2 / t2


# ----------------------------------------------------------- functional API
def log_likelihood(spec: ModelSpec, data, theta: dict, quadrature=QuadratureConfig()) -> float:
    """Joint log-likelihood at natural-scale coefficients ``theta``."""
    model = JointModel(spec, data, quadrature)
    model.set_state(theta)
    return model.log_likelihood()


def cum_hazard(spec: ModelSpec, data, theta: dict, subject: int, upper: float,
               quadrature=QuadratureConfig()) -> float:
    model = JointModel(spec, data, quadrature)
    model.set_state(theta)
    return model.cum_hazard(subject, upper)


def score(spec: ModelSpec, data, theta: dict, block: str, tau2: dict | None = None,
          quadrature=QuadratureConfig()) -> np.ndarray:
    model = JointModel(spec, data, quadrature)
    model.set_state(theta, tau2)
    return model.score(block)


def hessian(spec: ModelSpec, data, theta: dict, block: str, tau2: dict | None = None,
            quadrature=QuadratureConfig()) -> np.ndarray:
    model = JointModel(spec, data, quadrature)
    model.set_state(theta, tau2)
    return model.hessian(block)
