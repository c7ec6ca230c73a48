"""Univariate FPCA per marker and their combination into a multivariate basis.

Pipeline (see :func:`estimate_mfpc_basis`):

1. trim subjects with short follow-up,
2. fit a working-independence mean per marker and centre the observations,
3. smooth the off-diagonal crossproducts into a covariance surface,
4. eigendecompose it and predict conditional-expectation scores,
5. eigendecompose the (weighted) covariance of all univariate scores.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from .errors import DomainError, EstimationError, NumericalError, SchemaError
from .splinekit import (LinearTerm, SmoothTerm, SplineBasisDef, build_term,
                        difference_penalty, eval_bspline_basis)

log = logging.getLogger(__name__)

_GRID_TOL = 1e-10
VARIANCE_FLOOR = 1e-8


def trapezoid_weights(grid) -> np.ndarray:
    """Quadrature weights of the trapezoidal rule on ``grid``."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise DomainError("grid must be strictly increasing with at least two points")
    d = np.diff(g)
    w = np.zeros_like(g)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def interp_columns(grid, values, points) -> np.ndarray:
    """Linear interpolation of every column of ``values`` at ``points``."""
    grid = np.asarray(grid)
    x = np.atleast_1d(np.asarray(points, dtype=float))
    lo, hi = grid[0], grid[-1]
    tol = _GRID_TOL * (hi - lo)
    if x.size and (x.min() < lo - tol or x.max() > hi + tol):
        raise DomainError(f"evaluation time outside basis grid [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    j = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
    frac = (x - grid[j]) / (grid[j + 1] - grid[j])
    return values[j] * (1 - frac)[:, None] + values[j + 1] * frac[:, None]


# --------------------------------------------------------------------- types
@dataclass(frozen=True, eq=False)
class UfpcaResult:
    """Univariate FPCA of one marker on a grid."""

    marker: str
    grid: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    error_variance: float
    scores: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.eigenvalues.size


@dataclass(frozen=True, eq=False)
class MfpcBasis:
    """Grid-evaluated multivariate eigenfunctions ``psi_m^(k)`` and eigenvalues ``nu_m``.

    ``eigenfunctions[k]`` has shape ``(grid, M*)``; only the first ``M``
    columns are used by :meth:`evaluate`.
    """

    grid: np.ndarray
    weights: np.ndarray
    eigenfunctions: tuple
    eigenvalues: np.ndarray
    M: int
    markers: tuple = ()
    combination_weights: np.ndarray | None = None
    scores: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "grid", np.asarray(self.grid, dtype=float))
        set_(self, "weights", np.asarray(self.weights, dtype=float))
        set_(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=float))
        set_(self, "eigenfunctions", tuple(np.asarray(e, dtype=float) for e in self.eigenfunctions))
        if not self.markers:
            set_(self, "markers", tuple(str(k + 1) for k in range(len(self.eigenfunctions))))
        Mstar = self.eigenvalues.size
        if len(self.weights) != self.K or np.any(self.weights <= 0):
            raise SchemaError("need one positive weight per marker")
        for e in self.eigenfunctions:
            if e.shape != (self.grid.size, Mstar):
                raise SchemaError("eigenfunction matrices must be (grid, M*)")
        if not 1 <= self.M <= Mstar:
            raise SchemaError(f"truncation M={self.M} outside [1, {Mstar}]")
        trapezoid_weights(self.grid)

    @property
    def K(self) -> int:
        return len(self.eigenfunctions)

    @property
    def M_star(self) -> int:
        return self.eigenvalues.size

    @property
    def nu(self) -> np.ndarray:
        return self.eigenvalues[: self.M]

    def psi(self, k: int) -> np.ndarray:
        return self.eigenfunctions[k][:, : self.M]

    def evaluate(self, k: int, t) -> np.ndarray:
        """``psi^(k)_m(t)`` for m < M by linear interpolation; shape ``(len(t), M)``."""
        return interp_columns(self.grid, self.psi(k), t)

    def inner(self, f, g) -> np.ndarray:
        """Weighted scalar product ``sum_k w_k int f_k g_k`` of grid functions.

        ``f`` and ``g`` are K-lists of ``(grid,)`` or ``(grid, m)`` arrays.
        """
        tw = trapezoid_weights(self.grid)
        out = 0.0
        for k in range(self.K):
            fk = np.asarray(f[k], dtype=float)
            gk = np.asarray(g[k], dtype=float)
            out = out + self.weights[k] * np.tensordot(fk * _bcast(tw, fk), gk, axes=(0, 0))
        return out

    def gram(self) -> np.ndarray:
        """Matrix of scalar products of the retained eigenfunctions."""
        return self.inner([self.psi(k) for k in range(self.K)], [self.psi(k) for k in range(self.K)])

    def truncated(self, M: int) -> "MfpcBasis":
        return replace(self, M=int(M))

    # ---------------------------------------------------------------- JSON
    def to_dict(self) -> dict:
        out = {
            "grid": self.grid.tolist(),
            "weights": self.weights.tolist(),
            "markers": list(self.markers),
            "eigenfunctions": [e.tolist() for e in self.eigenfunctions],
            "eigenvalues": self.eigenvalues.tolist(),
            "M": int(self.M),
        }
        if self.combination_weights is not None:
            out["combination_weights"] = np.asarray(self.combination_weights).tolist()
        return out

    def to_json(self, path=None) -> str:
        # json writes floats with repr, which round-trips exactly
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MfpcBasis":
        try:
            cw = d.get("combination_weights")
            return cls(grid=np.array(d["grid"], dtype=float), weights=np.array(d["weights"], dtype=float),
                       eigenfunctions=tuple(np.array(e, dtype=float) for e in d["eigenfunctions"]),
                       eigenvalues=np.array(d["eigenvalues"], dtype=float), M=int(d["M"]),
                       markers=tuple(d.get("markers", ())),
                       combination_weights=None if cw is None else np.array(cw, dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed basis document: {exc}") from None

    @classmethod
    def from_json(cls, text_or_path) -> "MfpcBasis":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"basis file is not valid JSON: {exc}") from None
        return cls.from_dict(d)


def _bcast(w, a):
    return w if a.ndim == 1 else w[:, None]


# ---------------------------------------------------------------- mean fit
@dataclass(frozen=True, eq=False)
class MeanFit:
    """Working-independence penalized least-squares fit of one marker's mean."""

    terms: tuple
    built: tuple
    coef: np.ndarray
    smoothing: float
    residuals: np.ndarray

    def predict(self, subject, t) -> np.ndarray:
        return _design(self.built, subject, t) @ self.coef


def _design(built, subject, t):
    return np.hstack([b.evaluate(subject, t) for b in built])


def _penalty(built, scale):
    dims = [b.dim for b in built]
    S = np.zeros((sum(dims), sum(dims)))
    o = 0
    for b, d in zip(built, dims):
        if b.penalty is not None:
            S[o:o + d, o:o + d] = scale * b.penalty
        o += d
    return S


def estimate_marker_mean(data, marker: int, fixed_terms: Sequence | None = None):
    """Penalized least-squares mean of marker ``marker`` ignoring correlation.

    Smooth terms share one smoothing parameter chosen by GCV.

    Returns
    -------
    MeanFit
        ``residuals`` holds ``y* = y - eta*_mu(t)`` in ``data.marker_obs`` order.
    """
    subj, t, y = data.marker_obs(marker)
    if y.size == 0:
        raise SchemaError(f"marker {data.markers[marker]!r} has no observations")
    terms = tuple(fixed_terms) if fixed_terms is not None else (LinearTerm(("1", "t")),)
    built = tuple(build_term(term, data, f"mean_{marker + 1}", h, center_rows=(subj, t))
                  for h, term in enumerate(terms))
    X = _design(built, subj, t)
    XtX, Xty = X.T @ X, X.T @ y
    penalized = any(b.penalty is not None for b in built)
    n = y.size

    def solve(lam):
        A = XtX + _penalty(built, lam)
        try:
            c, low = linalg.cho_factor(A)
        except linalg.LinAlgError:
            names = ", ".join(b.name for b in built)
            raise NumericalError(f"singular normal equations for marker mean (terms: {names})") from None
        beta = linalg.cho_solve((c, low), Xty)
        edf = np.trace(linalg.cho_solve((c, low), XtX))
        return beta, edf

    def gcv(loglam):
        beta, edf = solve(np.exp(loglam))
        rss = np.sum((y - X @ beta) ** 2)
        return n * rss / max(n - edf, 1e-8) ** 2

    lam = 0.0
    if penalized:
        res = minimize_scalar(gcv, bounds=(-12, 15), method="bounded", options={"xatol": 1e-3})
        lam = float(np.exp(res.x))
    else:
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            names = ", ".join(b.name for b in built)
            raise NumericalError(f"singular normal equations for marker mean (rank {rank} < {X.shape[1]}; terms: {names})")
    beta, _ = solve(lam)
    return MeanFit(terms, built, beta, lam, y - X @ beta)


# --------------------------------------------------------- covariance smoothing
def _symmetric_map(p: int) -> tuple[np.ndarray, list]:
    """Matrix ``L`` with ``vec(Theta) = L theta`` for symmetric ``Theta``."""
    pairs = [(a, b) for a in range(p) for b in range(a, p)]
    L = np.zeros((p * p, len(pairs)))
    for j, (a, b) in enumerate(pairs):
        L[a * p + b, j] = 1.0
        L[b * p + a, j] = 1.0
    return L, pairs


def _pspline_gcv(X, y, w, S, extra_rss=0.0, n_raw=None):
    """Weighted penalized LS with GCV over the penalty multiplier."""
    XtWX = X.T @ (X * w[:, None])
    XtWy = X.T @ (w * y)
    n_raw = float(np.sum(w)) if n_raw is None else float(n_raw)
    scale = np.trace(XtWX) / max(np.trace(S), 1e-300)

    def fit(loglam):
        A = XtWX + np.exp(loglam) * scale * S
        A = 0.5 * (A + A.T)
        try:
            cf = linalg.cho_factor(A)
        except linalg.LinAlgError:
            return None, np.inf
        beta = linalg.cho_solve(cf, XtWy)
        edf = np.trace(linalg.cho_solve(cf, XtWX))
        return beta, edf

    def gcv(loglam):
        beta, edf = fit(loglam)
        if beta is None:
            return np.inf
        rss = np.sum(w * (y - X @ beta) ** 2) + extra_rss
        return n_raw * rss / max(n_raw - edf, 1e-8) ** 2

    res = minimize_scalar(gcv, bounds=(-20, 12), method="bounded", options={"xatol": 1e-3})
    beta, _ = fit(res.x)
    if beta is None:
        raise NumericalError("covariance smoother normal equations are singular")
    return beta


def _crossproducts(centered_obs):
    """Off-diagonal (s <= t) crossproducts aggregated to unique pairs."""
    s_all, t_all, v_all = [], [], []
    n_contrib = 0
    for times, vals in centered_obs:
        times = np.asarray(times, dtype=float)
        vals = np.asarray(vals, dtype=float)
        if times.size < 2:
            continue
        n_contrib += 1
        j, l = np.triu_indices(times.size, k=1)
        a, b = times[j], times[l]
        s_all.append(np.minimum(a, b))
        t_all.append(np.maximum(a, b))
        v_all.append(vals[j] * vals[l])
    if n_contrib < 2:
        raise EstimationError("covariance smoothing needs at least two subjects with two or more observations")
    s, t, v = (np.concatenate(a) for a in (s_all, t_all, v_all))
    keys, inv, cnt = np.unique(np.stack([s, t], 1), axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    sums = np.bincount(inv, weights=v)
    means = sums / cnt
    within = float(np.sum((v - means[inv]) ** 2))
    return keys[:, 0], keys[:, 1], means, cnt.astype(float), within, v.size


def smooth_covariance(centered_obs, grid, marginal_basis_size: int = 7) -> np.ndarray:
    """Symmetric tensor-product P-spline smooth of off-diagonal crossproducts.

    Parameters
    ----------
    centered_obs : sequence of (times, values)
        Per-subject centred observations of one marker.
    grid : array_like
        Output grid.
    marginal_basis_size : int
        Cubic B-splines per direction.

    Returns
    -------
    ndarray, shape (grid, grid)
        Exactly symmetric covariance surface.
    """
    grid = np.asarray(grid, dtype=float)
    trapezoid_weights(grid)
    s, t, v, cnt, within, n_raw = _crossproducts(centered_obs)
    p = marginal_basis_size
    bdef = SplineBasisDef(3, p, (grid[0], grid[-1]), 2)
    L, _ = _symmetric_map(p)
    Bs, Bt = eval_bspline_basis(bdef, s), eval_bspline_basis(bdef, t)
    X = np.einsum("ia,ib->iab", Bs, Bt).reshape(len(s), p * p) @ L
    D2 = difference_penalty(p, 2)
    I = np.eye(p)
    S = L.T @ (np.kron(D2, I) + np.kron(I, D2)) @ L
    theta = _pspline_gcv(X, v, cnt, S, extra_rss=within, n_raw=n_raw)
    Theta = (L @ theta).reshape(p, p)
    BG = eval_bspline_basis(bdef, grid)
    C = BG @ Theta @ BG.T
    return 0.5 * (C + C.T)


def estimate_error_variance(centered_obs, grid, surface, marginal_basis_size: int = 7) -> float:
    """Average gap between the smoothed squared residuals and the surface diagonal."""
    grid = np.asarray(grid, dtype=float)
    t = np.concatenate([np.asarray(ti, dtype=float) for ti, _ in centered_obs])
    y2 = np.concatenate([np.asarray(yi, dtype=float) ** 2 for _, yi in centered_obs])
    if t.size == 0:
        raise EstimationError("no observations for error-variance estimation")
    bdef = SplineBasisDef(3, marginal_basis_size, (grid[0], grid[-1]), 2)
    beta = _pspline_gcv(eval_bspline_basis(bdef, t), y2, np.ones_like(y2),
                        difference_penalty(marginal_basis_size, 2))
    diag_raw = eval_bspline_basis(bdef, grid) @ beta
    return max(float(np.mean(diag_raw - np.diag(surface))), VARIANCE_FLOOR)


# ------------------------------------------------------------- eigen-analysis
def eigen_decompose_covariance(surface, grid, pve_threshold: float = 0.99):
    """Eigenpairs of the covariance operator under trapezoidal quadrature.

    Returns
    -------
    eigenfunctions : ndarray, shape (grid, M_k)
        Unit L2 norm on the grid.
    eigenvalues : ndarray, shape (M_k,)
    M_k : int
    """
    C = np.asarray(surface, dtype=float)
    w = trapezoid_weights(grid)
    if C.shape != (w.size, w.size):
        raise SchemaError("surface shape does not match grid")
    if not (0 < pve_threshold <= 1):
        raise DomainError("pve_threshold must lie in (0, 1]")
    sw = np.sqrt(w)
    A = sw[:, None] * C * sw[None, :]
    vals, vecs = linalg.eigh(0.5 * (A + A.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vals[0] <= 0:
        raise EstimationError("covariance surface has no positive eigenvalues")
    pos = vals > vals[0] * 1e-12
    vals, vecs = vals[pos], vecs[:, pos]
    Mk = n_components_for_pve(vals, pve_threshold)
    phi = vecs[:, :Mk] / sw[:, None]
    signs = np.sign(np.sum(phi * w[:, None], axis=0))
    signs[signs == 0] = 1.0
    return phi * signs, vals[:Mk], Mk


def n_components_for_pve(eigenvalues, pve: float) -> int:
    """Smallest count whose cumulative share of the eigenvalue sum reaches ``pve``."""
    ev = np.asarray(eigenvalues, dtype=float)
    ratio = np.cumsum(ev) / ev.sum()
    # slack only absorbs rounding in the cumulative sum at pve = 1
    return int(min(np.searchsorted(ratio, pve - 1e-12) + 1, ev.size))


def predict_scores_ce(centered_obs, grid, eigenfunctions, eigenvalues, error_variance) -> np.ndarray:
    """Conditional-expectation (best linear) predictions of univariate scores.

    Computes ``D Phi' (Phi D Phi' + s2 I)^-1 y`` in the equivalent form
    ``(Phi'Phi + s2 D^-1)^-1 Phi' y``.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if np.any(lam <= 0):
        raise NumericalError("score prediction needs positive eigenvalues")
    s2 = float(error_variance)
    out = np.zeros((len(centered_obs), lam.size))
    Dinv = np.diag(s2 / lam)
    for i, (times, vals) in enumerate(centered_obs):
        if len(times) == 0:
            continue
        Phi = interp_columns(grid, eigenfunctions, times)
        A = Phi.T @ Phi + Dinv
        try:
            out[i] = linalg.solve(A, Phi.T @ np.asarray(vals, dtype=float), assume_a="pos")
        except linalg.LinAlgError:
            raise NumericalError(f"singular score system for subject {i}; increase error variance") from None
    return out


def ufpca(data, marker: int, grid, *, mean_terms=None, pve: float = 0.99,
          marginal_basis_size: int = 7) -> tuple[UfpcaResult, MeanFit]:
    """Univariate FPCA of one marker on ``grid``."""
    mean = estimate_marker_mean(data, marker, mean_terms)
    subj, t, _ = data.marker_obs(marker)
    cuts = np.searchsorted(subj, np.arange(data.n + 1))
    centered = [(t[a:b], mean.residuals[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]
    C = smooth_covariance(centered, grid, marginal_basis_size)
    s2 = estimate_error_variance(centered, grid, C, marginal_basis_size)
    phi, lam, _ = eigen_decompose_covariance(C, grid, pve)
    scores = predict_scores_ce(centered, grid, phi, lam, s2)
    # mean curve on the grid averaged over subjects' covariates
    g = np.asarray(grid, dtype=float)
    sub = np.repeat(np.arange(data.n), g.size)
    mgrid = mean.predict(sub, np.tile(g, data.n)).reshape(data.n, g.size).mean(axis=0)
    return UfpcaResult(data.markers[marker], g, mgrid, phi, lam, s2, scores), mean


# ---------------------------------------------------------------- combination
def combine_mfpca(ufpcas: Sequence[UfpcaResult], weights="equal") -> MfpcBasis:
    """Combine univariate FPCAs into multivariate eigenfunctions.

    Parameters
    ----------
    ufpcas : sequence of UfpcaResult
        With scores for the same subjects in the same order.
    weights : {"equal", "inverse-integrated-variance"} or array_like
        Scalar-product weights ``w_k``.

    Notes
    -----
    The score covariance uses the univariate eigenvalues on its diagonal
    blocks and empirical cross-covariances off the diagonal, so a single
    marker reproduces its univariate decomposition exactly.
    """
    ufpcas = list(ufpcas)
    K = len(ufpcas)
    if K == 0:
        raise SchemaError("need at least one univariate FPCA")
    grid = ufpcas[0].grid
    for u in ufpcas[1:]:
        if u.grid.shape != grid.shape or np.any(u.grid != grid):
            raise SchemaError("univariate FPCAs must share the grid")
    if K > 1:
        sizes = {u.scores.shape[0] for u in ufpcas if u.scores is not None}
        if any(u.scores is None for u in ufpcas) or len(sizes) != 1:
            raise SchemaError("univariate score matrices must share subject rows")
    if isinstance(weights, str):
        if weights in ("equal", "1", "ones"):
            w = np.ones(K)
        elif weights in ("inverse-integrated-variance", "inverse-variance"):
            w = np.array([1.0 / u.eigenvalues.sum() for u in ufpcas])
        else:
            raise SchemaError(f"unknown weight mode {weights!r}")
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (K,) or np.any(w <= 0):
            raise SchemaError("weights must be K positive numbers")

    sizes = [u.M for u in ufpcas]
    offs = np.r_[0, np.cumsum(sizes)]
    Mstar = offs[-1]
    Z = np.zeros((Mstar, Mstar))
    if K > 1:
        Xi = np.hstack([u.scores for u in ufpcas])
        n = Xi.shape[0]
        if n < 2:
            raise EstimationError("need at least two subjects to combine markers")
        Z = Xi.T @ Xi / (n - 1)
    for k, u in enumerate(ufpcas):
        Z[offs[k]:offs[k + 1], offs[k]:offs[k + 1]] = np.diag(u.eigenvalues)
    dw = np.sqrt(np.repeat(w, sizes))
    Zw = dw[:, None] * Z * dw[None, :]
    nu, c = linalg.eigh(0.5 * (Zw + Zw.T))
    order = np.argsort(nu)[::-1]
    nu, c = nu[order], c[:, order]
    keep = nu > max(nu[0], 0) * 1e-12
    if not np.any(keep):
        raise EstimationError("score covariance has no positive eigenvalues")
    nu, c = nu[keep], c[:, keep]
    big = np.argmax(np.abs(c), axis=0)
    c = c * np.sign(c[big, np.arange(c.shape[1])])

    tw = trapezoid_weights(grid)
    psi = [u.eigenfunctions @ c[offs[k]:offs[k + 1]] / np.sqrt(w[k]) for k, u in enumerate(ufpcas)]
    norms = np.sqrt(sum(w[k] * np.sum(tw[:, None] * psi[k] ** 2, axis=0) for k in range(K)))
    psi = [p / norms for p in psi]
    nu = nu * norms ** 2
    scores = None
    if all(u.scores is not None for u in ufpcas):
        Xi = np.hstack([u.scores for u in ufpcas])
        scores = (Xi * dw) @ c / norms
    return MfpcBasis(grid, w, tuple(psi), nu, nu.size, tuple(u.marker for u in ufpcas), c, scores)


def trim_subjects_for_mfpca(data, fraction: float = 0.1, min_obs: int = 0) -> np.ndarray:
    """Subjects with an observation after ``fraction * t_max`` on every marker.

    ``min_obs`` additionally requires that many observations per marker.
    """
    if not (0 < fraction < 1):
        raise DomainError("trimming fraction must lie in (0, 1)")
    cutoff = fraction * data.t_max
    ok = np.ones(data.n, dtype=bool)
    for k in range(data.K):
        subj, t, _ = data.marker_obs(k)
        late = np.bincount(subj[t > cutoff], minlength=data.n) > 0
        count = np.bincount(subj, minlength=data.n)
        ok &= late & (count >= min_obs)
    keep = np.flatnonzero(ok)
    if keep.size == 0:
        raise EstimationError("trimming removed every subject")
    return keep


def truncate_basis(basis: MfpcBasis, pve: float) -> MfpcBasis:
    """Keep the fewest components reaching ``pve`` of the total eigenvalue sum."""
    if not (0 < pve <= 1):
        raise DomainError("pve must lie in (0, 1]")
    return basis.truncated(n_components_for_pve(basis.eigenvalues, pve))


def estimate_mfpc_basis(data, *, grid=None, mean_terms=None, univariate_pve: float = 0.99,
                        weights="equal", trim_fraction: float | None = 0.1, min_obs: int = 0,
                        marginal_basis_size: int = 7, pve: float | None = None) -> MfpcBasis:
    """Full basis estimation from a dataset.

    Parameters
    ----------
    mean_terms : sequence of Term or mapping of marker index to terms, optional
        Fixed-effect terms of the working mean; default intercept and ``t``.
    trim_fraction : float or None
        Trimming cutoff; ``None`` disables trimming.
    pve : float, optional
        Multivariate truncation; default keeps all components.
    """
    if grid is None:
        grid = np.linspace(0.0, data.t_max, 101)
    if trim_fraction is not None:
        keep = trim_subjects_for_mfpca(data, trim_fraction, min_obs)
        log.info("trimming kept %d of %d subjects", keep.size, data.n)
        data = data.subset(keep)
    results = []
    for k in range(data.K):
        terms = mean_terms.get(k) if isinstance(mean_terms, dict) else mean_terms
        res, _ = ufpca(data, k, grid, mean_terms=terms, pve=univariate_pve,
                       marginal_basis_size=marginal_basis_size)
        results.append(res)
    basis = combine_mfpca(results, weights)
    return truncate_basis(basis, pve) if pve is not None else basis
