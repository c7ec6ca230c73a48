import numpy as np
import pytest
from scipy import integrate as spi

from conftest import make_basis, make_dataset
from mfpcjm.errors import EstimationError
from mfpcjm.jointmodel import ChainConfig, JointModel, ModelSpec, PriorConfig
from mfpcjm.jointmodel.sampler import BlockSampler, ig_full_conditional, mcmc_sample, slice_sample
from mfpcjm.splinekit import LinearTerm, MfpcTerm, SmoothTerm

LOG_SD = -0.7


def gaussian_model(rng, terms=(LinearTerm(("1", "t", "x")),), basis=None, n=12):
    """Longitudinal-only single-marker model with the noise level held fixed."""
    data = make_dataset(rng, n=n, K=1, per_marker=6)
    spec = ModelSpec({"mu_1": terms, "sigma_1": (LinearTerm(("1",)),)}, 1, basis, survival=False)
    model = JointModel(spec, data)
    model.set_state({"sigma_1": [LOG_SD]})
    return model, data


def closed_form_posterior(model, data):
    s, t, y = data.marker_obs(0)
    X = np.column_stack([np.ones(t.size), t, data.covariate("x")[s]])
    p = np.exp(-2 * LOG_SD)
    cov = np.linalg.inv(p * X.T @ X + model.blocks["mu_1"].prior_prec)
    return cov @ (p * X.T @ y), cov


def test_conjugate_block_matches_closed_form_posterior(rng):
    model, data = gaussian_model(rng)
    mean, cov = closed_form_posterior(model, data)
    S = 5000
    chain = ChainConfig(iterations=S + 100, burnin=100, thin=1, seed=7, update_variances=False,
                        sample_blocks=("mu_1",))
    fitted = mcmc_sample(model, chain)
    draws = fitted.samples["mu_1"]
    assert draws.shape == (S, 3)
    assert fitted.acceptance["mu_1"] == 1.0
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * sd / np.sqrt(S))
    emp = np.cov(draws.T)
    cov_se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / S)
    assert np.all(np.abs(emp - cov) < 3 * cov_se)


def test_quadratic_block_has_unit_acceptance_probability(rng):
    model, _ = gaussian_model(rng)
    sampler = BlockSampler(model, np.random.default_rng(1))
    for _ in range(50):
        sampler.mh_step("mu_1")
        assert sampler.last_accept_prob["mu_1"] == pytest.approx(1.0, abs=1e-10)


def test_quadratic_score_block_accepts_every_subject(rng):
    basis = make_basis(1, 2)
    model, _ = gaussian_model(rng, (LinearTerm(("1",)), MfpcTerm()), basis)
    sampler = BlockSampler(model, np.random.default_rng(2))
    assert [sampler.rho_step("rho_1") for _ in range(20)] == [1.0] * 20


def batch_means_se(x, batches=50):
    b = x[: x.shape[0] // batches * batches].reshape(batches, -1, *x.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(batches)


def test_two_gaussian_blocks_give_the_joint_posterior(rng):
    terms = (LinearTerm(("1", "x")), SmoothTerm("t", 6, 3, 2))
    model, data = gaussian_model(rng, terms)
    model.set_state(tau2={"mu_1.ps(t)": 0.5})
    A = np.hstack([model.blocks[n].X["obs"] for n in ("mu_1.lin(1,x)", "mu_1.ps(t)")])
    p = np.exp(-2 * LOG_SD)
    prior = np.zeros((A.shape[1],) * 2)
    prior[:2, :2] = model.blocks["mu_1.lin(1,x)"].prior_prec
    prior[2:, 2:] = model.blocks["mu_1.ps(t)"].penalty / 0.5
    cov = np.linalg.pinv(p * A.T @ A + prior)
    mean = cov @ (p * A.T @ data.marker_obs(0)[2])
    chain = ChainConfig(iterations=10100, burnin=100, thin=2, seed=3, update_variances=False,
                        sample_blocks=("mu_1.lin(1,x)", "mu_1.ps(t)"))
    fitted = mcmc_sample(model, chain)
    draws = np.hstack([fitted.samples["mu_1.lin(1,x)"], fitted.samples["mu_1.ps(t)"]])
    fitted_mean = A @ draws.T
    se = batch_means_se(fitted_mean.T)
    assert np.all(np.abs(fitted_mean.mean(axis=1) - A @ mean) < 4 * se)


def test_ig_full_conditional_algebra():
    assert ig_full_conditional(0.001, 0.001, 8, 3.0) == (4.001, 1.501)


def test_variance_gibbs_draws_follow_inverse_gamma(rng):
    model, _ = gaussian_model(rng, (LinearTerm(("1",)), SmoothTerm("t", 8, 3, 2)))
    name = "mu_1.ps(t)"
    model.set_state({name: rng.normal(size=model.blocks[name].dim)})
    b = model.blocks[name]
    a_post, b_post = ig_full_conditional(0.001, 0.001, b.rank, model.coef[name] @ b.penalty @ model.coef[name])
    sampler = BlockSampler(model, np.random.default_rng(4))
    draws = np.array([sampler.variance_step(name) for _ in range(20000)])
    want_mean = b_post / (a_post - 1)
    want_sd = want_mean / np.sqrt(a_post - 2)
    assert abs(draws.mean() - want_mean) < 4 * want_sd / np.sqrt(draws.size)


def test_slice_sampler_targets_standard_normal():
    rng = np.random.default_rng(5)
    x, out = 0.0, []
    for _ in range(20000):
        x = slice_sample(lambda u: -0.5 * u * u, x, rng)
        out.append(x)
    out = np.array(out)
    assert abs(out.mean()) < 4 * batch_means_se(out)
    assert abs(out.var() - 1) < 0.05


def test_half_cauchy_variance_draws_match_target(rng):
    data = make_dataset(rng, n=12, K=1, per_marker=6)
    spec = ModelSpec({"mu_1": (LinearTerm(("1",)), SmoothTerm("t", 8, 3, 2)), "sigma_1": (LinearTerm(("1",)),)},
                     1, None, PriorConfig(variance_prior="half-cauchy"), survival=False)
    model = JointModel(spec, data)
    name = "mu_1.ps(t)"
    model.set_state({name: 0.5 * rng.normal(size=model.blocks[name].dim)})
    b = model.blocks[name]
    quad, rank = model.coef[name] @ b.penalty @ model.coef[name], b.rank

    def dens(u):
        return np.exp(-0.5 * rank * u - 0.5 * quad * np.exp(-u) - np.log1p(np.exp(u)) + 0.5 * u)

    Z = spi.quad(dens, -30, 30, limit=200)[0]
    want = spi.quad(lambda u: u * dens(u), -30, 30, limit=200)[0] / Z
    sampler = BlockSampler(model, np.random.default_rng(6))
    draws = np.log([sampler.variance_step(name) for _ in range(20000)])
    assert abs(draws.mean() - want) < 4 * batch_means_se(draws)


def test_same_seed_same_chain(rng):
    chain = ChainConfig(iterations=60, burnin=10, thin=5, seed=9)
    out = []
    for _ in range(2):
        model, _ = gaussian_model(np.random.default_rng(0))
        out.append(mcmc_sample(model, chain).samples["mu_1"])
    np.testing.assert_array_equal(out[0], out[1])


def test_unknown_sample_block(rng):
    model, _ = gaussian_model(rng)
    with pytest.raises(EstimationError):
        mcmc_sample(model, ChainConfig(iterations=10, burnin=1, sample_blocks=("nope",)))
