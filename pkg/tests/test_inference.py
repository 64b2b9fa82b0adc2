import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from icebhm.inference import (
    GaussianPrior,
    GaussianSystem,
    HyperParameter,
    LatentModel,
    gaugau_exact,
    gaussian_condition,
    mwg_sample,
    run_chains,
    sample_posterior,
    split_rhat,
)
from icebhm.matern import MaternParams, PcPrior, pc_log_density
from icebhm.processes import SPATIAL_ONLY, ProcessSpec, build_block, stack


def random_instance(seed, n=None, m=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(3, 40))
    m = m or int(rng.integers(1, 30))
    A = sp.random(n, n, density=0.15, random_state=rng)
    Q = (A @ A.T + sp.diags(rng.uniform(0.5, 2.0, n))).tocsc()
    mean = rng.standard_normal(n)
    H = sp.random(m, n, density=0.3, random_state=rng, format="csr")
    nv = rng.uniform(0.05, 1.0, m)
    z = rng.standard_normal(m)
    return GaussianPrior(Q, mean), H, nv, z


@given(st.integers(0, 100_000))
def test_matches_dense_formula(seed):
    prior, H, nv, z = random_instance(seed)
    res = gaussian_condition(prior, H, nv, z)
    Sp = np.linalg.inv(prior.Q.toarray())
    mu, S = gaugau_exact(prior.mean, Sp, H.toarray(), np.diag(nv), z)
    np.testing.assert_allclose(res.mean, mu, atol=1e-8)
    n = len(mu)
    np.testing.assert_allclose(res.covariance_columns(np.arange(n)), S, atol=1e-8)
    np.testing.assert_allclose(res.marginal_sd**2, np.diag(S), atol=1e-8)


@given(st.integers(0, 100_000))
def test_log_marginal_likelihood_matches_dense(seed):
    prior, H, nv, z = random_instance(seed)
    Hd = H.toarray()
    Sp = np.linalg.inv(prior.Q.toarray())
    ref = stats.multivariate_normal(Hd @ prior.mean, Hd @ Sp @ Hd.T + np.diag(nv)).logpdf(z)
    assert gaussian_condition(prior, H, nv, z, variance="none").log_marginal_likelihood == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_no_observations_returns_prior():
    prior, _, _, _ = random_instance(3)
    res = gaussian_condition(prior, None, [], np.zeros(0))
    np.testing.assert_allclose(res.mean, prior.mean)
    np.testing.assert_allclose(res.marginal_sd**2, np.diag(np.linalg.inv(prior.Q.toarray())), rtol=1e-10)
    assert res.log_marginal_likelihood == 0.0


def test_half_variance_equals_two_copies():
    prior, H, nv, z = random_instance(8)
    one = gaussian_condition(prior, H, nv / 2, z)
    two = gaussian_condition(prior, sp.vstack([H, H]).tocsr(), np.concatenate([nv, nv]), np.concatenate([z, z]))
    np.testing.assert_allclose(one.mean, two.mean, atol=1e-12)
    np.testing.assert_allclose(one.Q_post.toarray(), two.Q_post.toarray(), atol=1e-12)


def test_gaugau_limits():
    rng = np.random.default_rng(0)
    n = 5
    A = rng.standard_normal((n, n))
    Sp = A @ A.T + n * np.eye(n)
    mu = rng.standard_normal(n)
    x = rng.standard_normal(n)
    m, S = gaugau_exact(mu, Sp, np.eye(n), 1e12 * Sp, x)
    np.testing.assert_allclose(m, mu, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(S, Sp, rtol=1e-4)
    m, S = gaugau_exact(mu, Sp, np.eye(n), Sp, x)
    np.testing.assert_allclose(m, (mu + x) / 2, atol=1e-12)
    np.testing.assert_allclose(S, Sp / 2, atol=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        gaugau_exact(mu, -Sp, np.eye(n), Sp, x)


def test_gaugau_cross_check_five_dim():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((5, 5))
    Sp = A @ A.T + np.eye(5)
    mu = rng.standard_normal(5)
    F = rng.standard_normal((3, 5))
    nv = np.array([0.3, 0.5, 0.7])
    x = rng.standard_normal(3)
    m, S = gaugau_exact(mu, Sp, F, np.diag(nv), x)
    res = gaussian_condition(GaussianPrior(sp.csc_matrix(np.linalg.inv(Sp)), mu), sp.csr_matrix(F), nv, x)
    np.testing.assert_allclose(res.mean, m, atol=1e-10)
    np.testing.assert_allclose(res.covariance_columns(np.arange(5)), S, atol=1e-10)


def test_variance_routes_agree():
    prior, H, nv, z = random_instance(5, n=60, m=20)
    exact = gaussian_condition(prior, H, nv, z)
    sampled = gaussian_condition(prior, H, nv, z, variance="sampling", n_variance_draws=20_000, seed=1)
    np.testing.assert_allclose(sampled.marginal_sd, exact.marginal_sd, rtol=0.03)
    assert gaussian_condition(prior, H, nv, z, variance="none").marginal_sd is None
    with pytest.raises(ValueError):
        gaussian_condition(prior, H, nv, z, variance="guess")
    with pytest.raises(ValueError):
        gaussian_condition(prior, H, np.zeros_like(nv), z)


def test_linear_combination_variance(small_mesh):
    U = build_block(ProcessSpec("U", SPATIAL_ONLY, small_mesh, MaternParams(1.0, 0.4)))
    prior = stack([U])
    rng = np.random.default_rng(2)
    H = sp.random(15, prior.size, density=0.02, random_state=rng, format="csr")
    res = gaussian_condition(prior, H, np.full(15, 0.1), rng.standard_normal(15))
    S = np.linalg.inv(res.Q_post.toarray())
    # local rows (inside the factor pattern) and a dense row (outside it)
    A = sp.vstack([sp.identity(prior.size, format="csr")[:5], sp.csr_matrix(np.ones((1, prior.size)))]).tocsr()
    ref = np.einsum("ij,jk,ik->i", A.toarray(), S, A.toarray())
    np.testing.assert_allclose(res.linear_combination_variance(A), ref, rtol=1e-9)
    B = sp.csr_matrix(rng.standard_normal((A.shape[0], prior.size)))
    ref = np.einsum("ij,jk,ik->i", A.toarray(), S, B.toarray())
    np.testing.assert_allclose(res.linear_combination_covariance(A, B), ref, rtol=1e-7, atol=1e-10)


def test_posterior_draws():
    prior, H, nv, z = random_instance(21, n=30, m=10)
    res = gaussian_condition(prior, H, nv, z)
    d = sample_posterior(res, 100_000, seed=5)
    np.testing.assert_array_less(np.abs(d.std(axis=0) / res.marginal_sd - 1), 0.02)
    np.testing.assert_array_equal(sample_posterior(res, 3, seed=5), sample_posterior(res, 3, seed=5))
    # a combination pinned by a near-noiseless datum barely moves
    h = sp.csr_matrix(np.eye(1, 30, 4))
    pinned = gaussian_condition(prior, h, [1e-16], np.array([0.7]))
    draws = sample_posterior(pinned, 200, seed=0)[:, 4]
    assert np.ptp(draws) < 1e-6


# -- sampler -------------------------------------------------------------------


def _conjugate_model(z, prior_sd):
    n = len(z)
    dummy = GaussianSystem(GaussianPrior(sp.identity(1, format="csc"), np.zeros(1)), sp.csr_matrix((0, 1)), np.zeros(0))

    def loglik(theta, z):
        return float(-0.5 * np.sum((z - theta["mu"]) ** 2) - 0.5 * n * math.log(2 * math.pi))

    return LatentModel(
        [HyperParameter("mu", 0.0, "identity", 0.5)],
        lambda th: -0.5 * (th["mu"] / prior_sd) ** 2,
        lambda th: dummy,
        loglik,
    )


def test_mwg_conjugate_normal_mean():
    rng = np.random.default_rng(4)
    z = 1.5 + rng.standard_normal(20)
    prior_sd = 2.0
    post_var = 1.0 / (len(z) + prior_sd**-2)
    post_mean = post_var * z.sum()
    ch = mwg_sample(_conjugate_model(z, prior_sd), z, 40_000, seed=1, burn_in=2000, draw_latent=False)
    x = ch.samples[:, 0]
    ess = len(x) / 10  # random-walk chains here mix within ~10 lags
    assert abs(x.mean() - post_mean) < 4 * math.sqrt(post_var / ess)
    assert x.var() == pytest.approx(post_var, rel=0.1)
    assert 0.2 < ch.acceptance_rate < 0.6


def test_mwg_without_data_recovers_pc_prior():
    pc = PcPrior(0.1, 0.05, 1.0, 0.05)
    dummy = GaussianSystem(GaussianPrior(sp.identity(1, format="csc"), np.zeros(1)), sp.csr_matrix((0, 1)), np.zeros(0))
    model = LatentModel(
        [HyperParameter("sigma", 0.5), HyperParameter("rho", 0.3)],
        lambda th: pc_log_density(pc, rho=th["rho"], sigma=th["sigma"]),
        lambda th: dummy,
        lambda th, z: 0.0,
    )
    chains = run_chains(model, np.zeros(0), 4, seed=7, n_iter=15_000, burn_in=3000, thin=5, draw_latent=False)
    sig = np.concatenate([c.samples[:, 0] for c in chains])
    rho = np.concatenate([c.samples[:, 1] for c in chains])
    # marginal CDFs: sigma ~ Exp(lambda_sigma); P(rho < r) = exp(-lambda_rho / r)
    for q in (0.25, 0.5, 0.75):
        assert np.quantile(sig, q) == pytest.approx(-math.log(1 - q) / pc.lambda_sigma, rel=0.1)
        assert np.quantile(rho, q) == pytest.approx(-pc.lambda_rho / math.log(q), rel=0.1)
    for j in range(2):
        assert split_rhat([c.samples[:, j] for c in chains]) < 1.05


def test_mwg_reproducible_and_latent_draws(small_mesh):
    from icebhm.models import SpdeRegressionModel

    U = build_block(ProcessSpec("U", SPATIAL_ONLY, small_mesh, MaternParams(1.0, 0.4)))
    prior = stack([U])
    rng = np.random.default_rng(0)
    idx = rng.choice(prior.size, 30, replace=False)
    H = sp.csr_matrix((np.ones(30), (np.arange(30), idx)), shape=(30, prior.size))
    z = rng.standard_normal(30)
    model = SpdeRegressionModel(prior, "U", H, np.full(30, 0.05), PcPrior(0.1, 0.05, 1.0, 0.05))
    a = mwg_sample(model.latent_model(), z, 60, seed=3, burn_in=30)
    b = mwg_sample(model.latent_model(), z, 60, seed=3, burn_in=30)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.latent, b.latent)
    assert a.latent.shape == (30, prior.size)
    # fast and generic likelihood routes agree
    theta = {"sigma": 0.8, "rho": 0.35}
    s = model.system(theta)
    slow = gaussian_condition(s.prior, s.H, s.noise_var, z, variance="none").log_marginal_likelihood
    assert model.log_marginal_likelihood(z, theta) == pytest.approx(slow, rel=1e-10)


def test_split_rhat():
    rng = np.random.default_rng(0)
    iid = [rng.standard_normal(2000) for _ in range(4)]
    assert split_rhat(iid) < 1.01
    shifted = [rng.standard_normal(2000) + k for k in range(4)]
    assert split_rhat(shifted) > 1.5
    trending = [np.linspace(0, 3, 2000) + rng.standard_normal(2000) for _ in range(4)]
    assert split_rhat(trending) > 1.1


def test_posterior_precision_is_exact_sum():
    prior, H, nv, z = random_instance(17)
    res = gaussian_condition(prior, H, nv, z)
    ref = (prior.Q + H.T @ sp.diags(1.0 / nv) @ H).tocsc()
    assert abs(res.Q_post - ref).max() == 0.0


@given(st.integers(0, 100_000))
def test_observation_order_irrelevant(seed):
    prior, H, nv, z = random_instance(seed)
    perm = np.random.default_rng(seed).permutation(len(z))
    a = gaussian_condition(prior, H, nv, z, variance="none")
    b = gaussian_condition(prior, H[perm], nv[perm], z[perm], variance="none")
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    assert a.log_marginal_likelihood == pytest.approx(b.log_marginal_likelihood, abs=1e-8)


def test_one_sweep_preserves_exact_posterior():
    rng = np.random.default_rng(12)
    z = 0.7 + rng.standard_normal(10)
    prior_sd = 1.5
    post_var = 1.0 / (len(z) + prior_sd**-2)
    post_mean = post_var * z.sum()
    starts = post_mean + math.sqrt(post_var) * rng.standard_normal(10_000)
    base = _conjugate_model(z, prior_sd)
    moved = np.empty_like(starts)
    for k, (x0, s) in enumerate(zip(starts, np.random.SeedSequence(3).spawn(len(starts)))):
        m = LatentModel([HyperParameter("mu", float(x0), "identity", 0.5)], base.log_prior, base.assemble, base.log_likelihood)
        moved[k] = mwg_sample(m, z, 1, seed=s, burn_in=0, draw_latent=False).samples[0, 0]
    assert np.mean(moved != starts) > 0.3
    fresh = post_mean + math.sqrt(post_var) * rng.standard_normal(10_000)
    # two-sample test; a correct kernel fails this 1% of the time by chance (seeds fixed)
    assert stats.ks_2samp(moved, fresh).pvalue > 0.01
