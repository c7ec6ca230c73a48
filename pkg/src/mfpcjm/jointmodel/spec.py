"""Declarative model specification: predictor term lists, priors, chain settings."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

from ..errors import ConfigError
from ..splinekit import LinearTerm, MfpcTerm, SmoothTerm, Term

SURVIVAL_LABELS = ("lambda", "gamma")


def marker_labels(K: int) -> list[str]:
    return [f"{p}_{k + 1}" for p in ("alpha", "mu", "sigma") for k in range(K)]


def split_label(label: str) -> tuple[str, int | None]:
    """``"mu_2"`` -> ``("mu", 1)``; ``"gamma"`` -> ``("gamma", None)``."""
    if "_" in label:
        head, tail = label.split("_", 1)
        return head, int(tail) - 1
    return label, None


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters.

    ``variance_prior`` is ``"ig"`` (conjugate inverse gamma on tau^2, Gibbs)
    or ``"half-cauchy"`` (on tau, slice sampled).
    """

    ig_a: float = 0.001
    ig_b: float = 0.001
    fixed_sd: float = 1000.0
    variance_prior: str = "ig"
    half_cauchy_scale: float = 1.0

    def __post_init__(self):
        if self.variance_prior not in ("ig", "half-cauchy"):
            raise ConfigError(f"unknown variance prior {self.variance_prior!r}")
        if min(self.ig_a, self.ig_b, self.fixed_sd, self.half_cauchy_scale) <= 0:
            raise ConfigError("prior hyperparameters must be positive")


@dataclass(frozen=True)
class QuadratureConfig:
    """Composite Gauss-Legendre rule on ``[0, T]``.

    Panels are split at ``breakpoints`` (fractions of the upper limit);
    an empty tuple gives a single panel.
    """

    nodes: int = 7
    breakpoints: tuple = (0.01, 0.1)

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        if self.nodes < 1 or any(not 0 < b < 1 for b in bp) or list(bp) != sorted(set(bp)):
            raise ConfigError("quadrature needs nodes >= 1 and increasing breakpoints in (0, 1)")
        object.__setattr__(self, "breakpoints", bp)


@dataclass(frozen=True)
class ChainConfig:
    """MCMC and mode-finding settings."""

    iterations: int = 5500
    burnin: int = 500
    thin: int = 5
    seed: int = 0
    survival_step: float = 0.1
    max_cycles: int = 200
    tol: float = 1e-6
    standardize: bool = True
    update_variances: bool = True
    sample_blocks: tuple | None = None

    def __post_init__(self):
        if self.iterations < 1 or self.burnin < 0 or self.thin < 1 or self.burnin >= self.iterations:
            raise ConfigError("need iterations > burnin >= 0 and thin >= 1")
        if not 0 < self.survival_step <= 1:
            raise ConfigError("survival_step must lie in (0, 1]")

    @property
    def n_samples(self) -> int:
        return len(range(self.burnin, self.iterations, self.thin))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Term lists of every predictor plus the shared MFPC basis.

    Parameters
    ----------
    predictors : mapping
        Label -> sequence of terms.  Labels are ``lambda``, ``gamma``,
        ``alpha_k``, ``mu_k`` and ``sigma_k`` with k = 1..K.
    mfpc_basis : MfpcBasis or None
        When given, every ``mu_k`` carries exactly one :class:`MfpcTerm`.
    survival : bool
        ``False`` drops the survival submodel (pure longitudinal model).
    """

    predictors: Mapping[str, tuple]
    K: int
    mfpc_basis: object = None
    priors: PriorConfig = field(default_factory=PriorConfig)
    survival: bool = True

    def __post_init__(self):
        preds = {lab: tuple(terms) for lab, terms in self.predictors.items()}
        required = list(marker_labels(self.K))
        if self.survival:
            required += list(SURVIVAL_LABELS)
        else:
            required = [r for r in required if not r.startswith("alpha")]
        missing = [r for r in required if r not in preds]
        if missing:
            raise ConfigError(f"missing predictors: {missing}")
        extra = [lab for lab in preds if lab not in required]
        if extra:
            raise ConfigError(f"unexpected predictors: {extra}")
        for lab, terms in preds.items():
            if not terms:
                raise ConfigError(f"predictor {lab!r} has no terms")
            n_mfpc = sum(isinstance(t, MfpcTerm) for t in terms)
            if n_mfpc and not lab.startswith("mu_"):
                raise ConfigError(f"MFPC terms belong to mu predictors only, found in {lab!r}")
            if lab.startswith("mu_"):
                if self.mfpc_basis is not None and n_mfpc != 1:
                    raise ConfigError(f"{lab!r} needs exactly one MFPC term when a basis is attached")
                if self.mfpc_basis is None and n_mfpc:
                    raise ConfigError(f"{lab!r} has an MFPC term but no basis is attached")
        if self.mfpc_basis is not None and self.mfpc_basis.K != self.K:
            raise ConfigError(f"basis has {self.mfpc_basis.K} markers, model has {self.K}")
        object.__setattr__(self, "predictors", preds)

    @property
    def labels(self) -> list[str]:
        return list(self.predictors)

    @classmethod
    def default(cls, K: int, basis=None, covariates: Sequence[str] = (), *,
                mu_columns: Sequence[str] | None = None, lambda_basis: int = 20,
                priors: PriorConfig | None = None, survival: bool = True) -> "ModelSpec":
        """Smooth log-baseline, linear gamma, constant associations and noise.

        ``mu_k`` gets an intercept, ``t``, the covariates and their
        interactions with ``t`` unless ``mu_columns`` is given.
        """
        covs = list(covariates)
        mu_cols = list(mu_columns) if mu_columns is not None else ["1", "t", *covs, *(f"t*{c}" for c in covs)]
        preds: dict[str, tuple] = {}
        if survival:
            preds["lambda"] = (SmoothTerm("t", lambda_basis, 3, 3, True),)
            preds["gamma"] = (LinearTerm(("1", *covs)),)
        for k in range(K):
            if survival:
                preds[f"alpha_{k + 1}"] = (LinearTerm(("1",)),)
            mu = [LinearTerm(tuple(mu_cols))]
            if basis is not None:
                mu.append(MfpcTerm())
            preds[f"mu_{k + 1}"] = tuple(mu)
            preds[f"sigma_{k + 1}"] = (LinearTerm(("1",)),)
        return cls(preds, K, basis, priors or PriorConfig(), survival)

    @classmethod
    def from_config(cls, cfg: Mapping, K: int, basis=None, covariates: Sequence[str] = ()) -> "ModelSpec":
        """Build from a parsed TOML/JSON mapping.

        Predictors not listed take the :meth:`default` terms with
        ``covariates``.  Keys ``alpha``, ``mu`` and ``sigma`` apply to every marker; ``mu_2``
        style keys override single markers.  Each term is a table with
        ``type`` in {linear, smooth, mfpc}.
        """
        cfg = dict(cfg)
        survival = bool(cfg.pop("survival", True))
        priors = PriorConfig(**_pick(PriorConfig, cfg.pop("priors", {})))
        raw = dict(cfg.pop("predictors", {}))
        if cfg:
            raise ConfigError(f"unknown model keys: {sorted(cfg)}")
        base = cls.default(K, basis, covariates, survival=survival, priors=priors)
        preds = dict(base.predictors)
        for key, terms in raw.items():
            parsed = tuple(_parse_term(t, key) for t in terms)
            if key in ("alpha", "mu", "sigma"):
                for k in range(K):
                    preds[f"{key}_{k + 1}"] = parsed
            elif key in preds:
                preds[key] = parsed
            else:
                raise ConfigError(f"unknown predictor {key!r}")
        # marker-specific keys win over the shared ones
        for key, terms in raw.items():
            if key in preds and "_" in key:
                preds[key] = tuple(_parse_term(t, key) for t in terms)
        return cls(preds, K, basis, priors, survival)


def _pick(klass, d: Mapping) -> dict:
    names = {f.name for f in fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    return dict(d)


def _parse_term(d: Mapping, where: str) -> Term:
    d = dict(d)
    kind = d.pop("type", None)
    try:
        if kind == "linear":
            return LinearTerm(tuple(d.pop("columns")))
        if kind == "smooth":
            return SmoothTerm(**d)
        if kind == "mfpc":
            if d:
                raise ConfigError(f"{where}: mfpc term takes no options")
            return MfpcTerm()
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"{where}: bad {kind} term: {exc}") from None
    raise ConfigError(f"{where}: unknown term type {kind!r}")


def chain_from_config(d: Mapping | None, **overrides) -> ChainConfig:
    d = dict(d or {})
    if "sample_blocks" in d and d["sample_blocks"] is not None:
        d["sample_blocks"] = tuple(d["sample_blocks"])
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ChainConfig(**_pick(ChainConfig, d))


def quadrature_from_config(d: Mapping | None) -> QuadratureConfig:
    d = dict(d or {})
    if "breakpoints" in d:
        d["breakpoints"] = tuple(d["breakpoints"])
    return QuadratureConfig(**_pick(QuadratureConfig, d))
