"""Composite Gauss-Legendre quadrature for cumulative hazards."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .spec import QuadratureConfig


@lru_cache(maxsize=None)
def _gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def panel_edges(config: QuadratureConfig) -> np.ndarray:
    return np.r_[0.0, config.breakpoints, 1.0]


def nodes_and_weights(upper, config: QuadratureConfig = QuadratureConfig()):
    """Nodes and weights on ``[0, upper]`` for each entry of ``upper``.

    Returns
    -------
    nodes, weights : ndarray, shape (len(upper), n_panels * config.nodes)
    """
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    x, w = _gauss_legendre(config.nodes)
    edges = panel_edges(config)
    a, b = edges[:-1], edges[1:]
    # unit-interval composite rule, then scaled by each upper limit
    u = ((b - a)[:, None] * (x[None, :] + 1) / 2 + a[:, None]).ravel()
    v = ((b - a)[:, None] * w[None, :] / 2).ravel()
    return upper[:, None] * u[None, :], upper[:, None] * v[None, :]


def integrate(fn, upper, config: QuadratureConfig = QuadratureConfig()) -> np.ndarray:
    """``int_0^upper fn(s) ds`` for vectorised ``fn``."""
    s, w = nodes_and_weights(upper, config)
    return np.sum(fn(s) * w, axis=1)


def refined(config: QuadratureConfig) -> QuadratureConfig:
    """Same rule with every panel split in two."""
    edges = panel_edges(config)
    mids = (edges[:-1] + edges[1:]) / 2
    bp = np.sort(np.r_[edges[1:-1], mids])
    return QuadratureConfig(config.nodes, tuple(bp.tolist()))
