import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import digamma

from svae import expfam as ef
from svae.errors import DomainError, UsageError

from oracles import FAMILY_DIMS, draw, logpdf, random_natural, random_spd


def fd_grad(f, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def logz_at(p):
    return lambda v: float(ef.log_partition(ef.NaturalParameters(p.family, p.dims, v)))


# ---------------------------------------------------------------------------
# log partition


def test_log_partition_standard_normal():
    p = ef.gaussian(np.zeros(1), np.eye(1))
    assert float(ef.log_partition(p)) == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)
    assert float(ef.log_partition(p)) == pytest.approx(0.91894, abs=1e-5)


def test_log_partition_flat_dirichlet_is_zero():
    assert float(ef.log_partition(ef.dirichlet([1.0, 1.0]))) == pytest.approx(0.0, abs=1e-12)


def test_log_partition_uniform_categorical():
    assert float(ef.log_partition(ef.categorical([0.0, 0.0]))) == pytest.approx(np.log(2), abs=1e-12)


@pytest.mark.parametrize("family,dims", FAMILY_DIMS)
def test_expected_stats_match_finite_differences(family, dims):
    rng = np.random.default_rng(1)
    for _ in range(3):
        p = random_natural(family, dims, rng)
        g = fd_grad(logz_at(p), p.data)
        e = np.asarray(ef.expected_stats(p).data)
        assert np.linalg.norm(g - e) / np.linalg.norm(e) < 1e-6


def test_stacked_parameters_vectorize():
    rng = np.random.default_rng(0)
    ps = [random_natural("niw", (2,), rng) for _ in range(3)]
    s = ef.stack(ps)
    lz = np.asarray(ef.log_partition(s))
    assert lz.shape == (3,)
    for i, p in enumerate(ps):
        assert lz[i] == pytest.approx(float(ef.log_partition(p)), rel=1e-13)


# ---------------------------------------------------------------------------
# expected statistics


def test_expected_stats_standard_normal():
    e = np.asarray(ef.expected_stats(ef.gaussian(np.zeros(1), np.eye(1))).data)
    np.testing.assert_allclose(e, [0.0, 1.0], atol=1e-12)


def test_expected_stats_flat_dirichlet():
    e = np.asarray(ef.expected_stats(ef.dirichlet([1.0, 1.0])).data)
    # psi(1) - psi(2) = -1
    np.testing.assert_allclose(e, [-1.0, -1.0], atol=1e-12)
    assert digamma(1.0) - digamma(2.0) == pytest.approx(-1.0)


def test_niw_expected_stats_monte_carlo():
    p = ef.niw(np.zeros(1), 1.0, np.eye(1), 3.0)
    e = np.asarray(ef.expected_stats(p).data)
    # layout (E[S^-1 mu], -E[S^-1]/2, -E[mu^2 S^-1]/2, -E[log S]/2)
    assert -2 * e[1] == pytest.approx(3.0, rel=1e-12)
    rng = np.random.default_rng(0)
    mu, S = draw(p, rng, 10**6)
    P = 1.0 / S[:, 0, 0]
    t = np.stack([P * mu[:, 0], -0.5 * P, -0.5 * P * mu[:, 0] ** 2, -0.5 * np.log(S[:, 0, 0])], axis=1)
    se = t.std(0) / np.sqrt(len(t))
    assert np.all(np.abs(e - t.mean(0)) < 4 * se)


@pytest.mark.parametrize("family,dims", [("niw", (2,)), ("mniw", (2, 2))])
def test_matrix_family_expected_stats_monte_carlo(family, dims):
    rng = np.random.default_rng(3)
    p = random_natural(family, dims, rng)
    x = draw(p, rng, 200_000)
    t = np.array([ef.statistic(family, dims, (a, b)) for a, b in zip(*[v[:200_000] for v in x])])
    e = np.asarray(ef.expected_stats(p).data)
    se = t.std(0) / np.sqrt(len(t))
    assert np.all(np.abs(t.mean(0) - e) < 5 * se + 1e-12)


def test_gaussian_second_moment_block_is_spd():
    rng = np.random.default_rng(2)
    p = random_natural("gaussian", (3,), rng)
    e = np.asarray(ef.expected_stats(p).data)
    mu, second = e[:3], e[3:].reshape(3, 3)
    np.linalg.cholesky(second - np.outer(mu, mu))


def test_categorical_expectations_in_simplex():
    e = np.asarray(ef.expected_stats(ef.categorical([0.3, -1.0, 2.0])).data)
    assert np.all(e >= 0) and e.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# KL


@pytest.mark.parametrize("family,dims", FAMILY_DIMS)
def test_kl_self_is_zero(family, dims):
    p = random_natural(family, dims, np.random.default_rng(4))
    assert abs(float(ef.kl_divergence(p, p))) < 1e-10


def test_kl_unit_gaussians():
    p = ef.gaussian_from_moments([0.0], [[1.0]])
    q = ef.gaussian_from_moments([1.0], [[1.0]])
    assert float(ef.kl_divergence(p, q)) == pytest.approx(0.5, abs=1e-12)


def test_kl_dirichlet_monte_carlo():
    p, q = ef.dirichlet([2.0, 2.0]), ef.dirichlet([1.0, 1.0])
    x = draw(p, np.random.default_rng(0), 10**6)
    r = logpdf(p, x) - logpdf(q, x)
    assert abs(float(ef.kl_divergence(p, q)) - r.mean()) < 3 * r.std() / np.sqrt(len(r))


def test_kl_family_mismatch():
    with pytest.raises(UsageError):
        ef.kl_divergence(ef.dirichlet([1.0, 1.0]), ef.categorical([0.0, 0.0]))


@given(st.integers(0, 10**6), st.sampled_from(FAMILY_DIMS))
def test_kl_nonnegative(seed, fd):
    family, dims = fd
    rng = np.random.default_rng(seed)
    p, q = random_natural(family, dims, rng), random_natural(family, dims, rng)
    assert float(ef.kl_divergence(p, q)) >= -1e-10


# ---------------------------------------------------------------------------
# conjugate updates


def test_dirichlet_count_increment():
    prior = ef.dirichlet([1.0, 1.0])
    post = ef.posterior_update(prior, [ef.conjugate_stats(prior, 0)])
    np.testing.assert_allclose(np.asarray(post.data), [2.0, 1.0])


def test_empty_update_is_identity():
    prior = ef.niw(np.zeros(2), 1.0, np.eye(2), 4.0)
    assert np.array_equal(np.asarray(ef.posterior_update(prior, []).data), np.asarray(prior.data))


def test_repeated_observations_equal_scaled_update():
    prior = ef.niw(np.zeros(2), 1.0, np.eye(2), 4.0)
    s = ef.conjugate_stats(prior, np.array([0.5, -1.0]))
    a = ef.posterior_update(prior, [s, s, s])
    b = ef.posterior_update(prior, [s], scale=3.0)
    np.testing.assert_allclose(np.asarray(a.data), np.asarray(b.data), rtol=1e-14)


def test_update_layout_mismatch():
    prior = ef.dirichlet([1.0, 1.0])
    other = ef.conjugate_stats(ef.dirichlet([1.0, 1.0, 1.0]), 0)
    with pytest.raises(UsageError):
        ef.posterior_update(prior, [other])
    with pytest.raises(UsageError):
        ef.posterior_update(prior, [], scale=0.0)


def test_niw_posterior_mean_matches_quadrature():
    """Sequential updates agree with the textbook NIW posterior."""
    rng = np.random.default_rng(5)
    x = rng.normal(1.5, 0.7, size=20)
    prior = ef.niw(np.zeros(1), 0.5, np.eye(1), 3.0)
    post = ef.posterior_update(prior, [ef.conjugate_stats(prior, np.array([v])) for v in x])
    mu0, kappa, Psi, nu = ef.niw_params(post)
    assert kappa == pytest.approx(20.5)
    assert nu == pytest.approx(23.0)
    assert mu0[0] == pytest.approx(x.sum() / 20.5, rel=1e-12)
    xbar = x.mean()
    psi_ref = 1.0 + np.sum((x - xbar) ** 2) + 0.5 * 20 / 20.5 * xbar**2
    assert Psi[0, 0] == pytest.approx(psi_ref, rel=1e-10)


def test_mniw_update_matches_regression_formula():
    rng = np.random.default_rng(6)
    prior = ef.mniw(np.zeros((2, 2)), np.eye(2), np.eye(2), 4.0)
    xs = rng.standard_normal((30, 2))
    A = np.array([[0.9, 0.1], [-0.2, 0.8]])
    ys = xs @ A.T + 0.1 * rng.standard_normal((30, 2))
    post = ef.posterior_update(prior, [ef.conjugate_stats(prior, (x, y)) for x, y in zip(xs, ys)])
    M, K, _, nu = ef.mniw_params(post)
    np.testing.assert_allclose(K, np.eye(2) + xs.T @ xs, rtol=1e-12)
    np.testing.assert_allclose(M, ys.T @ xs @ np.linalg.inv(K), rtol=1e-10)
    assert nu == pytest.approx(34.0)


# ---------------------------------------------------------------------------
# sampling and domain checks


def test_sample_degenerate_gaussian():
    p = ef.gaussian(np.zeros(1), 1e12 * np.eye(1))
    rng = np.random.default_rng(0)
    xs = np.array([ef.sample(p, rng) for _ in range(2000)])
    assert np.mean(np.abs(xs) < 1e-4) > 0.999


def test_sample_flat_dirichlet_mean():
    p = ef.dirichlet([1.0, 1.0])
    rng = np.random.default_rng(0)
    xs = np.array([ef.sample(p, rng) for _ in range(10**5)])
    np.testing.assert_allclose(xs.mean(0), [0.5, 0.5], atol=0.01)


@pytest.mark.parametrize("family,dims", FAMILY_DIMS)
def test_sample_deterministic_given_seed(family, dims):
    p = random_natural(family, dims, np.random.default_rng(0))
    a = ef.sample(p, np.random.default_rng(9))
    b = ef.sample(p, np.random.default_rng(9))
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_array_equal(u, v)


@pytest.mark.parametrize(
    "p,msg",
    [
        (ef.gaussian(np.zeros(2), -np.eye(2)), "precision"),
        (ef.dirichlet([1.0, 0.0]), "strictly positive"),
        (ef.niw(np.zeros(2), 1.0, -np.eye(2), 4.0), "Psi"),
        (ef.niw(np.zeros(2), 1.0, np.eye(2), 0.5), "degrees of freedom"),
        (ef.mniw(np.eye(2), -np.eye(2), np.eye(2), 4.0), "column precision"),
    ],
)
def test_improper_parameters_name_the_constraint(p, msg):
    with pytest.raises(DomainError, match=msg):
        ef.log_partition(p)
    with pytest.raises(DomainError):
        ef.sample(p, np.random.default_rng(0))
    assert not ef.is_proper(p)


def test_gaussian_mean_parameter_round_trip():
    rng = np.random.default_rng(7)
    p = ef.gaussian_from_moments(rng.standard_normal(3), random_spd(rng, 3))
    back = ef.gaussian_from_expected(ef.expected_stats(p))
    np.testing.assert_allclose(np.asarray(back.data), np.asarray(p.data), atol=1e-10)


# ---------------------------------------------------------------------------
# Fisher information


@pytest.mark.parametrize("family,dims", FAMILY_DIMS)
def test_fisher_vector_product_matches_differenced_stats(family, dims):
    rng = np.random.default_rng(8)
    p = random_natural(family, dims, rng)
    v = rng.standard_normal(np.shape(p.data))
    h = 1e-6

    def stats(x):
        return np.asarray(ef.expected_stats(ef.NaturalParameters(p.family, p.dims, x)).data)

    fd = (stats(np.asarray(p.data) + h * v) - stats(np.asarray(p.data) - h * v)) / (2 * h)
    np.testing.assert_allclose(np.asarray(ef.fisher_vector_product(p, v)), fd, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("family,dims", [f for f in FAMILY_DIMS if f[0] != "categorical"])
def test_fisher_solve_inverts_the_product(family, dims):
    rng = np.random.default_rng(10)
    p = random_natural(family, dims, rng)
    E = ef.symmetric_embedding(family, dims)
    x = E @ rng.standard_normal(E.shape[1])
    g = np.asarray(ef.fisher_vector_product(p, x))
    sol, jittered = ef.fisher_solve(p, g)
    assert not bool(jittered)
    np.testing.assert_allclose(np.asarray(sol), x, rtol=1e-6, atol=1e-8)


def test_oracle_inverse_wishart_sampler():
    from scipy import stats

    from oracles import invwishart_draws, iw_logpdf

    Psi, nu = random_spd(np.random.default_rng(0), 2), 6.5
    S = invwishart_draws(Psi, nu, np.random.default_rng(1), 200_000)
    ref = stats.invwishart(df=nu, scale=Psi)
    se = S.std(0) / np.sqrt(len(S))
    assert np.all(np.abs(S.mean(0) - ref.mean()) < 4 * se)
    np.testing.assert_allclose(iw_logpdf(S[:5], Psi, nu), ref.logpdf(np.moveaxis(S[:5], 0, -1)), rtol=1e-10)
