import json

import numpy as np
import pytest

from mfpcjm.data import LongSurvDataset
from mfpcjm.errors import EstimationError, SchemaError
from mfpcjm.fpca import (MfpcBasis, UfpcaResult, combine_mfpca, eigen_decompose_covariance,
                         estimate_marker_mean, estimate_mfpc_basis, n_components_for_pve,
                         predict_scores_ce, smooth_covariance, trapezoid_weights, trim_subjects_for_mfpca,
                         truncate_basis, ufpca)
from mfpcjm.simgen import SCENARIO_II_NU, build_scenario, simulate
from mfpcjm.splinekit import LinearTerm

GRID = np.linspace(0, 1, 101)
TW = trapezoid_weights(GRID)


def legendre(t):
    """First three shifted Legendre polynomials, orthonormal on [0, 1]."""
    t = np.asarray(t, dtype=float)
    return np.column_stack([np.ones_like(t), np.sqrt(3) * (2 * t - 1), np.sqrt(5) * (6 * t ** 2 - 6 * t + 1)])


def grid_orthonormal(m=3):
    Q, _ = np.linalg.qr(np.sqrt(TW)[:, None] * legendre(GRID)[:, :m])
    return Q / np.sqrt(TW)[:, None]


def whitened_scores(rng, n, nu):
    """Scores whose empirical covariance (divisor n) is exactly diag(nu)."""
    X = rng.normal(size=(n, len(nu)))
    X -= X.mean(axis=0)
    L = np.linalg.cholesky(X.T @ X / n)
    return np.linalg.solve(L, X.T).T * np.sqrt(nu)


def dataset_from_curves(times_per_subject, values_per_subject, markers=("y1",)):
    n = len(times_per_subject[0])
    mk, sb, ot, ov = [], [], [], []
    for k in range(len(markers)):
        for i in range(n):
            t = times_per_subject[k][i]
            mk += [k] * len(t)
            sb += [i] * len(t)
            ot += list(t)
            ov += list(values_per_subject[k][i])
    return LongSurvDataset(np.arange(1, n + 1), np.ones(n), np.zeros(n, dtype=int), {}, markers,
                           mk, sb, ot, ov, t_max=1.0)


def test_trapezoid_weights_integrate_linear_exactly():
    assert abs(np.sum(TW * (3 * GRID + 1)) - 2.5) < 1e-14


def test_rank_one_decomposition():
    phi = np.sqrt(2) * np.sin(np.pi * GRID)
    phi /= np.sqrt(np.sum(TW * phi ** 2))
    C = 2.5 * np.outer(phi, phi)
    f, lam, M = eigen_decompose_covariance(C, GRID, 0.99)
    assert M == 1
    assert abs(lam[0] - 2.5) < 1e-8
    assert min(np.max(np.abs(f[:, 0] - phi)), np.max(np.abs(f[:, 0] + phi))) < 1e-8


def test_three_component_kernel_decomposition():
    Phi = grid_orthonormal(3)
    nu = np.array([1.0, 0.5, 0.25])
    f, lam, M = eigen_decompose_covariance(Phi @ np.diag(nu) @ Phi.T, GRID, 1.0)
    assert M == 3
    np.testing.assert_allclose(lam, nu, atol=1e-6)
    np.testing.assert_allclose(f.T @ (TW[:, None] * f), np.eye(3), atol=1e-10)


def test_pve_one_keeps_all_positive():
    C = np.diag(np.r_[np.ones(3), np.zeros(GRID.size - 3)])
    _, lam, M = eigen_decompose_covariance(C, GRID, 1.0)
    assert M == 3 and np.all(lam > 0)


def test_no_positive_eigenvalue_is_estimation_error():
    with pytest.raises(EstimationError):
        eigen_decompose_covariance(-np.eye(GRID.size), GRID, 0.99)


def test_pve_rule_on_published_eigenvalues():
    nu = SCENARIO_II_NU
    ratio = np.cumsum(nu) / nu.sum()
    expected = int(np.argmax(ratio >= 0.99)) + 1
    assert expected == 5
    assert n_components_for_pve(nu, 0.99) == expected
    assert n_components_for_pve(nu, 1.0) == 6
    assert n_components_for_pve([3.0], 0.5) == 1


def test_smoother_is_exactly_symmetric(rng):
    obs = [(np.sort(rng.uniform(0, 1, 6)), rng.normal(size=6)) for _ in range(40)]
    C = smooth_covariance(obs, GRID)
    assert np.max(np.abs(C - C.T)) == 0


def test_smoother_rank_one_dense_noiseless(rng):
    phi = np.sqrt(2) * np.sin(np.pi * GRID)
    t = np.linspace(0, 1, 21)
    xi = whitened_scores(rng, 300, [2.0])[:, 0]
    obs = [(t, x * np.sqrt(2) * np.sin(np.pi * t)) for x in xi]
    C = smooth_covariance(obs, GRID)
    # crossproduct averages use divisor n
    assert np.max(np.abs(C - 2.0 * np.outer(phi, phi))) < 0.05 * 2.0


def test_smoother_white_noise(rng):
    s2 = 0.5
    t = np.linspace(0, 1, 21)
    obs = [(t, rng.normal(scale=np.sqrt(s2), size=t.size)) for _ in range(500)]
    C = smooth_covariance(obs, GRID)
    assert np.max(np.abs(C)) < 0.1 * s2


def test_smoother_needs_pairs():
    with pytest.raises(EstimationError):
        smooth_covariance([(np.array([0.5]), np.array([1.0]))] * 10, GRID)


def test_eigenvalue_recovery_three_components(rng):
    nu = np.array([1.0, 0.5, 0.25])
    t = np.linspace(0, 1, 21)
    xi = whitened_scores(rng, 500, nu)
    obs = [(t, legendre(t) @ x) for x in xi]
    C = smooth_covariance(obs, GRID)
    _, lam, _ = eigen_decompose_covariance(C, GRID, 0.999)
    np.testing.assert_allclose(lam[:3], nu, rtol=0.05)


def test_ce_scores_dense_noiseless(rng):
    phi = legendre(GRID)
    lam = np.array([1.0, 0.5, 0.25])
    t = np.linspace(0, 1, 51)
    xi = rng.normal(size=(4, 3)) * np.sqrt(lam)
    obs = [(t, legendre(t) @ x) for x in xi]
    got = predict_scores_ce(obs, GRID, phi, lam, 1e-12)
    np.testing.assert_allclose(got, xi, atol=1e-4)


def test_ce_scores_empty_subject_and_shrinkage(rng):
    phi = legendre(GRID)
    lam = np.array([1.0, 0.5, 0.25])
    t = np.array([0.1, 0.5, 0.9])
    obs = [(np.zeros(0), np.zeros(0)), (t, legendre(t) @ np.array([1.0, -1.0, 0.5]))]
    norms = []
    for s2 in [0.01, 0.1, 1.0, 10.0, 1e6]:
        sc = predict_scores_ce(obs, GRID, phi, lam, s2)
        np.testing.assert_array_equal(sc[0], 0)
        norms.append(np.linalg.norm(sc[1]))
    assert np.all(np.diff(norms) < 0)
    assert norms[-1] < 1e-4


def test_marker_mean_constant_trajectory():
    t = [np.linspace(0, 1, 5)] * 8
    data = dataset_from_curves([t], [[np.full(5, 2.5)] * 8])
    fit = estimate_marker_mean(data, 0)
    np.testing.assert_allclose(fit.predict(np.zeros(GRID.size, dtype=int), GRID), 2.5, atol=1e-6)


def test_marker_mean_residuals_centered_scenario_I():
    data, _ = simulate(build_scenario("I", 150), 11)
    fit = estimate_marker_mean(data, 0, [LinearTerm(("1", "t", "x", "t*x"))])
    assert abs(fit.residuals.mean()) < 0.05


def test_marker_without_observations_is_schema_error():
    data = dataset_from_curves([[np.linspace(0, 1, 3)] * 3, [np.zeros(0)] * 3],
                               [[np.ones(3)] * 3, [np.zeros(0)] * 3], markers=("a", "b"))
    with pytest.raises(SchemaError):
        estimate_marker_mean(data, 1)


def _ufpca_result(name, phi, lam, scores):
    return UfpcaResult(name, GRID, np.zeros(GRID.size), phi, lam, 0.01, scores)


def test_single_marker_degeneracy(rng):
    t = np.linspace(0, 1, 15)
    xi = rng.normal(size=(80, 3)) * np.sqrt([1.0, 0.5, 0.25])
    data = dataset_from_curves([[t] * 80], [[legendre(t) @ x + rng.normal(scale=0.05, size=t.size) for x in xi]])
    u, _ = ufpca(data, 0, GRID, pve=0.99)
    basis = combine_mfpca([u], [1.0])
    assert basis.M == u.M
    np.testing.assert_allclose(basis.eigenvalues, u.eigenvalues, atol=1e-10, rtol=0)
    np.testing.assert_allclose(basis.psi(0), u.eigenfunctions, atol=1e-10, rtol=0)


def test_independent_identity_scores_give_equal_eigenvalues(rng):
    phi = grid_orthonormal(2)
    n = 400
    xi = whitened_scores(rng, n, np.ones(4)) * np.sqrt((n - 1) / n)
    us = [_ufpca_result("a", phi, np.ones(2), xi[:, :2]), _ufpca_result("b", phi, np.ones(2), xi[:, 2:])]
    basis = combine_mfpca(us)
    np.testing.assert_allclose(basis.eigenvalues, 1.0, atol=1e-10)
    np.testing.assert_allclose(basis.gram(), np.eye(4), atol=1e-10)


def test_combine_rejects_mismatched_grids(rng):
    phi = legendre(GRID)[:, :1]
    other = UfpcaResult("b", GRID * 0.5, np.zeros(GRID.size), phi, np.ones(1), 0.1, np.zeros((3, 1)))
    with pytest.raises(SchemaError):
        combine_mfpca([_ufpca_result("a", phi, np.ones(1), np.zeros((3, 1))), other])
    with pytest.raises(SchemaError):
        combine_mfpca([_ufpca_result("a", phi, np.ones(1), np.zeros((3, 1))),
                       _ufpca_result("b", phi, np.ones(1), np.zeros((4, 1)))])


def _imbalanced_dataset(rng, n=200):
    """Two markers sharing one score; marker 1 has 70 times the variance."""
    t = np.linspace(0, 1, 11)
    xi = rng.normal(size=n)
    e = rng.normal(size=(n, 2)) * 0.3
    f1 = np.sqrt(70) * np.sqrt(2) * np.sin(np.pi * t)
    f2 = np.sqrt(2) * np.sin(np.pi * t)
    v1 = [xi[i] * f1 + e[i, 0] * np.sqrt(70) * np.sqrt(3) * (2 * t - 1) + rng.normal(scale=0.05, size=t.size)
          for i in range(n)]
    v2 = [xi[i] * f2 + e[i, 1] * np.sqrt(3) * (2 * t - 1) + rng.normal(scale=0.05, size=t.size) for i in range(n)]
    return dataset_from_curves([[t] * n, [t] * n], [v1, v2], markers=("big", "small"))


def _share(basis, k, m=0):
    parts = [basis.weights[j] * np.sum(TW * basis.psi(j)[:, m] ** 2) for j in range(basis.K)]
    return parts[k] / sum(parts)


def test_inverse_variance_weights_rebalance_markers(rng):
    data = _imbalanced_dataset(rng)
    equal = estimate_mfpc_basis(data, grid=GRID, trim_fraction=None)
    inv = estimate_mfpc_basis(data, grid=GRID, weights="inverse-integrated-variance", trim_fraction=None)
    assert _share(equal, 0) > 0.9
    assert _share(inv, 0) < 0.9


def test_estimated_basis_is_orthonormal():
    data, _ = simulate(build_scenario("II", 200), 5)
    for weights in ("equal", "inverse-variance"):
        basis = estimate_mfpc_basis(data, weights=weights)
        assert np.max(np.abs(basis.gram() - np.eye(basis.M))) < 1e-6
        assert np.all(np.diff(basis.eigenvalues) <= 0)
        assert basis.M_star == basis.M


def test_explained_variance_identity():
    data, _ = simulate(build_scenario("II", 150), 8)
    basis = estimate_mfpc_basis(data)
    # integrated variance of the reconstructed process equals the eigenvalue sum
    total = sum(basis.weights[k] * np.sum(TW * (basis.psi(k) ** 2 @ basis.nu)) for k in range(basis.K))
    assert abs(total - basis.nu.sum()) < 1e-6 * max(1.0, basis.nu.sum())


def test_truncate_basis_rule():
    phi = [legendre(GRID)[:, :3] for _ in range(1)]
    b = MfpcBasis(GRID, [1.0], phi, np.array([3.0, 1.0, 0.01]), 3)
    assert truncate_basis(b, 0.7).M == 1
    assert truncate_basis(b, 0.99).M == 2
    assert truncate_basis(b, 1.0).M == 3


def test_trimming_rule():
    t_late = np.array([0.0, 0.5])
    t_early = np.array([0.0, 0.05])
    data = dataset_from_curves([[t_late, t_early, t_late], [t_late, t_late, t_early]],
                               [[np.zeros(2)] * 3, [np.zeros(2)] * 3], markers=("a", "b"))
    np.testing.assert_array_equal(trim_subjects_for_mfpca(data, 0.1), [0])
    with pytest.raises(EstimationError):
        trim_subjects_for_mfpca(data.subset([1, 2]), 0.1)


def test_basis_json_round_trip_is_bit_exact(tmp_path, rng):
    phi = (rng.normal(size=(GRID.size, 3)), rng.normal(size=(GRID.size, 3)))
    b = MfpcBasis(GRID, [1.0, 0.3], phi, np.array([1 / 3, 1 / 7, 1 / 11]), 2, ("a", "b"))
    path = tmp_path / "basis.json"
    b.to_json(path)
    back = MfpcBasis.from_json(path)
    for k in range(2):
        np.testing.assert_array_equal(back.eigenfunctions[k], b.eigenfunctions[k])
    np.testing.assert_array_equal(back.eigenvalues, b.eigenvalues)
    np.testing.assert_array_equal(back.grid, b.grid)
    assert back.M == 2 and back.markers == ("a", "b")


def test_malformed_basis_json():
    with pytest.raises(SchemaError):
        MfpcBasis.from_json(json.dumps({"grid": [0, 1]}))
