"""B-spline bases, difference penalties, sum-to-zero centering and term designs.

Every structured additive term is a basis expansion ``f = X beta`` with a
quadratic penalty ``beta' K beta``.  Three term kinds exist:

* :class:`LinearTerm` - unpenalized columns built from covariate products,
  e.g. ``("1", "t", "x", "t*x")``.
* :class:`SmoothTerm` - P-spline in ``t`` or a covariate.
* :class:`MfpcTerm` - the functional random effect ``sum_m rho_im psi_m(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline

from .errors import ConfigError, DomainError, NumericalError, SchemaError

_DOMAIN_TOL = 1e-10


@dataclass(frozen=True)
class SplineBasisDef:
    """B-spline basis with equidistant interior knots and repeated boundaries.

    Parameters
    ----------
    degree : int
        Polynomial degree (3 for cubic).
    num_basis : int
        Number of basis functions before any centering.
    domain : tuple of float
        Closed interval ``(lo, hi)``.
    penalty_order : int
        Order of the difference penalty attached to the basis.
    """

    degree: int = 3
    num_basis: int = 20
    domain: tuple = (0.0, 1.0)
    penalty_order: int = 3

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        object.__setattr__(self, "domain", (lo, hi))
        if self.degree < 0 or int(self.degree) != self.degree:
            raise ConfigError(f"degree must be a nonnegative integer, got {self.degree}")
        if self.num_basis <= self.degree + 1:
            raise ConfigError(f"num_basis={self.num_basis} must exceed degree+1={self.degree + 1}")
        if not (self.penalty_order >= 1 and self.penalty_order < self.num_basis):
            raise ConfigError("penalty_order must lie in [1, num_basis)")
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ConfigError(f"degenerate domain {self.domain}")

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        breaks = np.linspace(lo, hi, self.num_basis - self.degree + 1)
        return np.r_[[lo] * self.degree, breaks, [hi] * self.degree]


def eval_bspline_basis(basis: SplineBasisDef, points) -> np.ndarray:
    """Evaluate all basis functions at ``points``.

    Returns
    -------
    ndarray, shape (len(points), num_basis)
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    lo, hi = basis.domain
    tol = _DOMAIN_TOL * (hi - lo)
    if x.size and (np.any(~np.isfinite(x)) or x.min() < lo - tol or x.max() > hi + tol):
        raise DomainError(f"evaluation points outside basis domain [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    if x.size == 0:
        return np.zeros((0, basis.num_basis))
    return BSpline.design_matrix(x, basis.knots, basis.degree).toarray()


def difference_penalty(num_basis: int, order: int) -> np.ndarray:
    """Penalty ``D'D`` built from the ``order``-th difference matrix ``D``."""
    if order < 1 or order >= num_basis:
        raise ConfigError(f"difference order {order} needs 1 <= order < num_basis={num_basis}")
    D = np.diff(np.eye(num_basis), n=order, axis=0)
    return D.T @ D


@dataclass(frozen=True)
class CenteringRecord:
    """Reparameterization ``beta_full = Z beta`` enforcing column sums of zero."""

    applied: bool
    Z: np.ndarray | None = None

    def expand(self, beta):
        return beta if not self.applied else self.Z @ beta


def center_design(design, penalty):
    """Absorb the sum-to-zero constraint ``1'X beta = 0`` into the basis.

    Uses the null space of the constraint row from a complete QR
    factorization, so the penalty maps to ``Z'KZ``.

    Returns
    -------
    design_c : ndarray, shape (rows, p - 1)
    penalty_c : ndarray, shape (p - 1, p - 1)
    record : CenteringRecord
    """
    X = np.asarray(design, dtype=float)
    K = np.asarray(penalty, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ConfigError("centering needs a design with at least two columns")
    if not np.all(np.isfinite(X)) or not np.any(X):
        raise NumericalError("constraint transformation is rank deficient (design zero or non-finite)")
    c = X.sum(axis=0)
    q, _ = np.linalg.qr(c[:, None], mode="complete")
    Z = q[:, 1:]
    Kc = Z.T @ K @ Z
    return X @ Z, 0.5 * (Kc + Kc.T), CenteringRecord(True, Z)


# ---------------------------------------------------------------- term kinds
@dataclass(frozen=True)
class LinearTerm:
    """Unpenalized columns; each column is a ``*``-product of ``1``, ``t`` or covariates."""

    columns: tuple = ("1",)

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(str(c).replace(" ", "") for c in self.columns))
        if not self.columns:
            raise ConfigError("linear term needs at least one column")

    @property
    def name(self) -> str:
        return "lin(" + ",".join(self.columns) + ")"


@dataclass(frozen=True)
class SmoothTerm:
    """Penalized B-spline (P-spline) in ``var``."""

    var: str = "t"
    num_basis: int = 20
    degree: int = 3
    penalty_order: int = 3
    center: bool = True

    @property
    def name(self) -> str:
        return f"ps({self.var})"


@dataclass(frozen=True)
class MfpcTerm:
    """Functional random effect represented by the shared MFPC basis."""

    @property
    def name(self) -> str:
        return "mfpc"


Term = LinearTerm | SmoothTerm | MfpcTerm


@dataclass(frozen=True, eq=False)
class TermDesign:
    """Design and penalty of one term evaluated at a set of rows.

    ``design`` is dense for linear and smooth terms and a sparse
    block-diagonal matrix for the MFPC term.
    """

    design: np.ndarray | sp.spmatrix
    penalty: np.ndarray | None
    centering: CenteringRecord
    label: str
    index: int


@dataclass(frozen=True, eq=False)
class BuiltTerm:
    """A term bound to a dataset: knows how to evaluate its design anywhere.

    ``evaluate(subject, t)`` returns the dense row block for the given
    (subject position, time) pairs.  For the MFPC term it returns the
    compact ``(rows, M)`` matrix of eigenfunction values; see
    :func:`mfpc_blockdiag` for the expanded form.
    """

    term: Term
    label: str
    index: int
    dim: int
    penalty: np.ndarray | None
    rank: int
    centering: CenteringRecord
    evaluate: Callable = field(repr=False)
    coef_names: tuple = ()

    @property
    def kind(self) -> str:
        return {LinearTerm: "linear", SmoothTerm: "smooth", MfpcTerm: "mfpc"}[type(self.term)]

    @property
    def name(self) -> str:
        return f"{self.label}.{self.term.name}"


def _factor_values(factor, data, subject, t):
    if factor == "1":
        return np.ones(len(subject))
    if factor == "t":
        return np.asarray(t, dtype=float)
    if factor not in data.covariates:
        raise SchemaError(f"term references unknown covariate {factor!r}")
    return data.covariates[factor][subject]


def _linear_columns(columns, data, subject, t):
    out = np.empty((len(subject), len(columns)))
    for j, col in enumerate(columns):
        v = np.ones(len(subject))
        for factor in col.split("*"):
            v = v * _factor_values(factor, data, subject, t)
        out[:, j] = v
    return out


def build_term(term: Term, data, label: str, index: int = 0, *, center_rows=None,
               basis=None, marker: int | None = None) -> BuiltTerm:
    """Bind ``term`` of predictor ``label`` to ``data``.

    Parameters
    ----------
    center_rows : tuple of arrays, optional
        ``(subject, t)`` rows over which smooth terms are centered.
    basis : MfpcBasis, optional
        Required for :class:`MfpcTerm`.
    marker : int, optional
        Marker index selecting ``psi^(k)`` for the MFPC term.
    """
    if isinstance(term, LinearTerm):
        for col in term.columns:
            for factor in col.split("*"):
                if factor not in ("1", "t") and factor not in data.covariates:
                    raise SchemaError(f"{label}: term references unknown covariate {factor!r}")
        cols = term.columns

        def evaluate(subject, t):
            return _linear_columns(cols, data, np.asarray(subject), t)

        names = tuple("(Intercept)" if c == "1" else c for c in cols)
        return BuiltTerm(term, label, index, len(cols), None, 0, CenteringRecord(False), evaluate, names)

    if isinstance(term, SmoothTerm):
        if term.var == "t":
            domain = (0.0, float(data.t_max))
        else:
            v = data.covariate(term.var)
            domain = (float(v.min()), float(v.max()))
        bdef = SplineBasisDef(term.degree, term.num_basis, domain, term.penalty_order)
        K = difference_penalty(term.num_basis, term.penalty_order)
        var = term.var

        def raw(subject, t):
            x = np.asarray(t, dtype=float) if var == "t" else data.covariates[var][np.asarray(subject)]
            return eval_bspline_basis(bdef, x)

        record = CenteringRecord(False)
        if term.center:
            if center_rows is None:
                raise ConfigError(f"{label}: centering rows required for smooth term")
            _, K, record = center_design(raw(*center_rows), K)
        rank = int(np.linalg.matrix_rank(K))
        Z = record.Z

        def evaluate(subject, t):
            X = raw(subject, t)
            return X @ Z if Z is not None else X

        dim = K.shape[0]
        return BuiltTerm(term, label, index, dim, K, rank, record, evaluate,
                         tuple(str(j + 1) for j in range(dim)))

    if isinstance(term, MfpcTerm):
        if basis is None or marker is None:
            raise ConfigError(f"{label}: MFPC term needs a basis and marker index")

        def evaluate(subject, t):
            return basis.evaluate(marker, t)

        return BuiltTerm(term, label, index, basis.M, None, 0, CenteringRecord(False), evaluate,
                         tuple(str(m + 1) for m in range(basis.M)))

    raise ConfigError(f"unknown term type {type(term).__name__}")


def mfpc_blockdiag(psi_rows: np.ndarray, subject: np.ndarray, n: int) -> sp.csr_matrix:
    """Expand compact eigenfunction rows into ``blockdiag(Psi_1, ..., Psi_n)``.

    Column ``i*M + m`` multiplies score ``rho_im`` (subject-major order), so
    the product with ``rho.ravel()`` gives ``sum_m rho_im psi_m(t)``.
    """
    psi_rows = np.asarray(psi_rows, dtype=float)
    rows, M = psi_rows.shape
    subject = np.asarray(subject, dtype=int)
    r = np.repeat(np.arange(rows), M)
    c = (subject[:, None] * M + np.arange(M)).ravel()
    return sp.csr_matrix((psi_rows.ravel(), (r, c)), shape=(rows, n * M))


def stacked_mfpc_design(basis, data, times_per_marker: Sequence) -> sp.csr_matrix:
    """Vertical stack over markers of the per-marker block-diagonal designs.

    ``times_per_marker[k]`` is a ``(subject, t)`` pair of arrays.
    """
    blocks = [mfpc_blockdiag(basis.evaluate(k, t), s, data.n)
              for k, (s, t) in enumerate(times_per_marker)]
    return sp.vstack(blocks, format="csr")


def assemble_predictor_design(terms: Sequence[Term], data, eval_times, label: str, *,
                              basis=None, marker: int | None = None) -> list:
    """Evaluate every term of predictor ``label`` at per-subject times.

    Parameters
    ----------
    terms : sequence of Term
    data : LongSurvDataset
    eval_times : sequence of array_like
        ``eval_times[i]`` holds the evaluation times of subject ``i``; rows are
        stacked subject by subject.  Smooth terms are centered over these rows.
    label : str
        Predictor label such as ``"mu_1"``.

    Returns
    -------
    list of TermDesign
    """
    if len(eval_times) != data.n:
        raise SchemaError("eval_times must provide one time vector per subject")
    subject = np.concatenate([np.full(len(ti), i) for i, ti in enumerate(eval_times)]).astype(int)
    t = np.concatenate([np.asarray(ti, dtype=float) for ti in eval_times]) if data.n else np.zeros(0)
    if t.size and (t.min() < 0 or np.any(t > data.time[subject] * (1 + 1e-12))):
        raise DomainError(f"{label}: evaluation times outside the follow-up interval")
    out = []
    for h, term in enumerate(terms):
        bt = build_term(term, data, label, h, center_rows=(subject, t), basis=basis, marker=marker)
        X = bt.evaluate(subject, t)
        if isinstance(term, MfpcTerm):
            X = mfpc_blockdiag(X, subject, data.n)
        out.append(TermDesign(X, bt.penalty, bt.centering, label, h))
    return out
