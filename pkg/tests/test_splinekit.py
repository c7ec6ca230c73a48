import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_basis, make_dataset
from mfpcjm.errors import ConfigError, DomainError, NumericalError, SchemaError
from mfpcjm.splinekit import (LinearTerm, MfpcTerm, SmoothTerm, SplineBasisDef, assemble_predictor_design,
                              build_term, center_design, difference_penalty, eval_bspline_basis,
                              mfpc_blockdiag, stacked_mfpc_design)


def cox_de_boor(knots, degree, j, x):
    """Textbook recursion; right-continuous except at the last knot."""
    if degree == 0:
        if knots[j] <= x < knots[j + 1]:
            return 1.0
        if x == knots[-1] and knots[j] < knots[j + 1] == knots[-1]:
            return 1.0
        return 0.0
    out = 0.0
    d1 = knots[j + degree] - knots[j]
    if d1 > 0:
        out += (x - knots[j]) / d1 * cox_de_boor(knots, degree - 1, j, x)
    d2 = knots[j + degree + 1] - knots[j + 1]
    if d2 > 0:
        out += (knots[j + degree + 1] - x) / d2 * cox_de_boor(knots, degree - 1, j + 1, x)
    return out


def test_cubic_row_matches_recursion():
    b = SplineBasisDef(3, 10, (0, 1))
    row = eval_bspline_basis(b, [0.5])[0]
    oracle = [cox_de_boor(b.knots, 3, j, 0.5) for j in range(10)]
    np.testing.assert_allclose(row, oracle, atol=1e-12)


@pytest.mark.parametrize("x", [0.0, 0.137, 0.61, 1.0])
def test_rows_match_recursion_including_boundaries(x):
    b = SplineBasisDef(3, 8, (0, 1))
    oracle = [cox_de_boor(b.knots, 3, j, x) for j in range(8)]
    np.testing.assert_allclose(eval_bspline_basis(b, [x])[0], oracle, atol=1e-12)


def test_degree_zero_indicator():
    b = SplineBasisDef(0, 4, (0, 1), penalty_order=1)
    np.testing.assert_array_equal(eval_bspline_basis(b, [0.3])[0], [0, 1, 0, 0])


def test_knots_have_boundary_repeats():
    k = SplineBasisDef(3, 20, (0, 2)).knots
    assert np.all(np.diff(k) >= 0)
    assert np.sum(k == 0) == 4 and np.sum(k == 2) == 4


def test_partition_of_unity_on_random_points(rng):
    b = SplineBasisDef(3, 20, (-1, 3))
    B = eval_bspline_basis(b, rng.uniform(-1, 3, 1000))
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-12
    assert B.min() >= 0 and B.max() <= 1


@settings(max_examples=40, deadline=None)
@given(degree=st.integers(0, 4), extra=st.integers(1, 12), lo=st.floats(-5, 5),
       width=st.floats(0.1, 10), u=st.floats(0, 1))
def test_partition_of_unity_property(degree, extra, lo, width, u):
    b = SplineBasisDef(degree, degree + 1 + extra, (lo, lo + width), penalty_order=1)
    row = eval_bspline_basis(b, [lo + u * width])[0]
    assert abs(row.sum() - 1) < 1e-12
    assert np.all(row >= -1e-15)


def test_outside_domain_is_domain_error():
    with pytest.raises(DomainError):
        eval_bspline_basis(SplineBasisDef(3, 10), [1.01])


def test_invalid_basis_is_config_error():
    with pytest.raises(ConfigError):
        SplineBasisDef(3, 4)
    with pytest.raises(ConfigError):
        SplineBasisDef(3, 10, penalty_order=10)
    with pytest.raises(ConfigError):
        SplineBasisDef(3, 10, (1, 1))


def test_difference_penalty_hand_multiplied():
    K = difference_penalty(4, 1)
    np.testing.assert_array_equal(K, [[1, -1, 0, 0], [-1, 2, -1, 0], [0, -1, 2, -1], [0, 0, -1, 1]])


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_difference_penalty_null_space_and_rank(order):
    n = 12
    K = difference_penalty(n, order)
    idx = np.arange(1, n + 1, dtype=float)
    for d in range(order):
        assert np.max(np.abs(K @ idx ** d)) < 1e-10 * max(1, np.max(idx ** d))
    assert np.linalg.matrix_rank(K) == n - order
    np.testing.assert_array_equal(K, K.T)


def test_difference_penalty_order_too_large():
    with pytest.raises(ConfigError):
        difference_penalty(4, 4)


def test_center_design_columns_sum_to_zero(rng):
    X = eval_bspline_basis(SplineBasisDef(3, 10), rng.uniform(0, 1, 200))
    Xc, Kc, rec = center_design(X, difference_penalty(10, 2))
    assert Xc.shape == (200, 9) and rec.applied
    assert np.max(np.abs(Xc.sum(axis=0))) < 1e-10
    np.testing.assert_array_equal(Kc, Kc.T)


def test_center_design_idempotent(rng):
    X = rng.normal(size=(50, 4))
    X -= X.mean(axis=0)
    Xc, _, _ = center_design(X, np.eye(4))
    assert np.max(np.abs(Xc.sum(axis=0))) < 1e-10


def test_centering_preserves_penalized_fit(rng):
    x = np.linspace(0, 1, 400)
    X = eval_bspline_basis(SplineBasisDef(3, 12), x)
    K = difference_penalty(12, 2)
    Xc, Kc, _ = center_design(X, K)
    for _ in range(5):
        y = rng.normal(size=x.size)
        y -= y.mean()

        def fit(D, P):
            A = np.column_stack([np.ones(x.size), D])
            Pen = np.zeros((A.shape[1],) * 2)
            Pen[1:, 1:] = 0.1 * P
            return A @ np.linalg.solve(A.T @ A + Pen, A.T @ y)

        np.testing.assert_allclose(fit(Xc, Kc), fit(X, K), atol=1e-8)


def test_center_design_errors():
    with pytest.raises(ConfigError):
        center_design(np.ones((5, 1)), np.eye(1))
    with pytest.raises(NumericalError):
        center_design(np.zeros((5, 3)), np.eye(3))


def test_linear_term_of_binary_covariate(rng):
    data = make_dataset(rng)
    bt = build_term(LinearTerm(("x",)), data, "gamma")
    np.testing.assert_array_equal(bt.evaluate(np.arange(data.n), data.time)[:, 0], data.covariate("x"))


def test_linear_term_products(rng):
    data = make_dataset(rng)
    bt = build_term(LinearTerm(("1", "t", "t*x")), data, "mu_1", marker=0)
    s, t, _ = data.marker_obs(0)
    X = bt.evaluate(s, t)
    np.testing.assert_allclose(X, np.column_stack([np.ones(t.size), t, t * data.covariate("x")[s]]))


def test_missing_covariate_is_schema_error(rng):
    data = make_dataset(rng)
    with pytest.raises(SchemaError):
        build_term(LinearTerm(("1", "age")), data, "gamma")


def test_smooth_term_penalty_rank(rng):
    data = make_dataset(rng)
    bt = build_term(SmoothTerm("t", 20, 3, 3, True), data, "lambda",
                    center_rows=(np.arange(data.n), data.time))
    assert bt.dim == 19
    assert bt.rank < bt.dim


def test_mfpc_blockdiag_two_subjects():
    psi = np.array([[1.0, 2.0], [3.0, 4.0]])
    D = mfpc_blockdiag(psi, np.array([0, 1]), 2).toarray()
    np.testing.assert_array_equal(D, [[1, 2, 0, 0], [0, 0, 3, 4]])


def test_stacked_mfpc_design_matches_direct_evaluation(rng):
    data = make_dataset(rng, n=6, K=2)
    basis = make_basis(2, 3)
    rows = [data.marker_obs(k)[:2] for k in range(2)]
    D = stacked_mfpc_design(basis, data, rows).toarray()
    rho = rng.normal(size=(data.n, 3))
    got = D @ rho.ravel()
    want = []
    for k in range(2):
        s, t, _ = data.marker_obs(k)
        want.append(np.sum(basis.evaluate(k, t) * rho[s], axis=1))
    np.testing.assert_allclose(got, np.concatenate(want), atol=1e-12)


def test_mfpc_evaluation_outside_grid(rng):
    basis = make_basis(2, 2, t_max=0.5)
    with pytest.raises(DomainError):
        basis.evaluate(0, [0.7])


def test_assemble_predictor_design_shapes(rng):
    data = make_dataset(rng)
    basis = make_basis(2, 2)
    terms = (LinearTerm(("1", "t")), SmoothTerm("t", 6, 3, 2), MfpcTerm())
    times = [np.linspace(0, T, 3) for T in data.time]
    designs = assemble_predictor_design(terms, data, times, "mu_2", basis=basis, marker=1)
    rows = 3 * data.n
    assert [d.design.shape for d in designs] == [(rows, 2), (rows, 5), (rows, data.n * 2)]
    assert np.max(np.abs(designs[1].design.sum(axis=0))) < 1e-10
    np.testing.assert_array_equal(designs[1].penalty, designs[1].penalty.T)


def test_assemble_rejects_times_beyond_follow_up(rng):
    data = make_dataset(rng)
    times = [np.array([0.0, T + 0.1]) for T in data.time]
    with pytest.raises(DomainError):
        assemble_predictor_design((LinearTerm(("1",)),), data, times, "mu_1")
