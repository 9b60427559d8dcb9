import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from svae import conjugate, core, gradcheck, models, nn
from svae import expfam as ef
from svae import inference as inf
from svae.errors import ConfigError, UsageError


def same(a, b):
    return np.array_equal(np.asarray(a), np.asarray(b))


# ---------------------------------------------------------------------------
# construction


def test_build_is_deterministic():
    cfg = models.ModelConfig(structure="slds", K=3, m=2, p=4, seed=3)
    a, b = models.build(cfg), models.build(cfg)
    assert same(a.phi, b.phi) and same(a.gamma, b.gamma)
    for k in a.eta:
        assert same(a.eta[k].data, b.eta[k].data)
    c = models.build(models.ModelConfig(structure="slds", K=3, m=2, p=4, seed=4))
    assert not same(a.phi, c.phi)


def test_gmm_globals_start_near_the_prior():
    cfg = models.ModelConfig(structure="gmm", K=5, m=2, p=2, seed=0)
    model = models.build(cfg)
    assert set(model.eta) == {"pi", "niw"}
    assert all(ef.is_proper(e) for e in model.eta.values())
    mus = np.stack([ef.niw_params(model.eta["niw"][k])[0] for k in range(5)])
    assert len(np.unique(mus.round(12), axis=0)) == 5
    assert not same(model.eta["pi"].data, model.prior["pi"].data)


def test_dot_video_architecture():
    cfg = models.ModelConfig(structure="lds", m=8, p=20, enc_hidden=(50,), dec_hidden=(50,))
    model = models.build(cfg)
    assert model.enc_spec.widths == (20, 50, 8) and model.dec_spec.widths == (8, 50, 20)
    assert model.m == 8 and model.p == 20


def test_default_priors():
    pr = models.priors(models.ModelConfig(structure="slds", K=2, m=3))
    mu0, kappa, Psi, nu = ef.niw_params(pr["init_x"])
    assert kappa == pytest.approx(0.05) and nu == pytest.approx(5.0)
    assert np.allclose(Psi, np.eye(3)) and not np.any(mu0)
    M, _, _, _ = ef.mniw_params(pr["dyn"][0])
    assert np.allclose(M, 0.9 * np.eye(3))
    assert np.allclose(np.asarray(pr["trans"].data), 1.0)


@pytest.mark.parametrize(
    "kw",
    [dict(K=0), dict(m=0), dict(structure="hmm"), dict(alpha=0.0), dict(niw_nu=0.5), dict(init_cov=0.0), dict(trans_sticky=-1.0)],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        models.ModelConfig(**kw)


@settings(max_examples=8)
@given(st.sampled_from(["gmm", "lds", "slds", "vae"]), st.integers(1, 3), st.integers(1, 3), st.integers(0, 100))
def test_first_step_is_finite(structure, K, m, seed):
    cfg = models.ModelConfig(structure=structure, K=K, m=m, p=3, enc_hidden=(4,), dec_hidden=(4,), N=10, seed=seed)
    model = models.build(cfg)
    y = np.random.default_rng(seed).standard_normal((4, 3))
    rep, g = core.svae_gradients(model, y, np.random.default_rng(seed))
    assert np.isfinite(rep.bound) and g.all_finite()


# ---------------------------------------------------------------------------
# reductions to simpler models


def test_linear_lds_reproduces_conjugate_inference():
    model, y = gradcheck.random_sanity_instance(11, m=3, T=7)
    pot = nn.recognition_potentials(model.phi, model.enc_spec, y)
    q = inf.kalman_smoother(model.expected_globals(), pot)
    mean, _, _ = conjugate.optimal_local(model, y)
    assert np.max(np.abs(np.asarray(q.mean) - mean)) < 1e-8


def test_single_component_gmm_matches_vae_bound():
    """With q(theta) concentrated on N(0, I), the K=1 mixture bound minus its
    global KL equals the standard-normal latent bound."""
    base = dict(K=1, m=2, p=3, enc_hidden=(4,), dec_hidden=(), nonlinearity="identity", N=5, seed=1)
    vae = models.build(models.ModelConfig(structure="vae", **base))
    gmm = models.build(models.ModelConfig(structure="gmm", **base))
    big = 1e9
    eta = dict(pi=ef.dirichlet([1.0]), niw=ef.stack([ef.niw(np.zeros(2), big, big * np.eye(2), big)]))
    gmm = gmm.replace(eta=eta, prior=eta, phi=vae.phi, gamma=vae.gamma)
    y = np.random.default_rng(1).standard_normal((5, 3))
    noise = core.draw_noise(vae, y, np.random.default_rng(2))
    a, b = core.svae_bound(gmm, y, noise), core.svae_bound(vae, y, noise)
    assert abs((a.recon - a.kl_local) - (b.recon - b.kl_local)) < 1e-5
    assert abs(a.bound + a.kl_global - b.bound) < 1e-5


# ---------------------------------------------------------------------------
# forecasting


def identity_lds(p=3, m=2):
    cfg = models.ModelConfig(structure="lds", m=m, p=p, enc_hidden=(5,), dec_hidden=(5,), seed=0)
    model = models.build(cfg)
    big = 1e6
    dyn = ef.mniw(np.eye(m), big * np.eye(m), 0.1 * big * np.eye(m), big)
    return model.replace(eta=dict(model.eta, dyn=dyn))


def test_identity_dynamics_hold_the_last_mean():
    model = identity_lds()
    prefix = np.random.default_rng(0).standard_normal((6, 3))
    fc = models.forecast(model, models.ForecastRequest(prefix, horizon=1, noiseless=True))
    assert fc.frames.shape == (1, 1, 3) and fc.latents.shape == (1, 1, 2)
    np.testing.assert_allclose(fc.latents[0, 0], fc.prefix_means[-1], rtol=1e-9, atol=1e-12)
    mean, _ = nn.forward_gaussian(model.gamma, model.dec_spec, fc.latents[0, 0])
    np.testing.assert_allclose(fc.frames[0, 0], np.asarray(mean), rtol=1e-12)


@pytest.mark.parametrize("structure", ["lds", "slds"])
def test_rollouts_with_the_same_seed_match(structure):
    cfg = models.ModelConfig(structure=structure, K=2, m=2, p=3, enc_hidden=(5,), dec_hidden=(5,), seed=1)
    model = models.build(cfg)
    prefix = np.random.default_rng(1).standard_normal((5, 3))
    fc = models.forecast(model, models.ForecastRequest(prefix, horizon=4, n_samples=2, seeds=(7, 7)))
    assert fc.frames.shape == (2, 4, 3)
    assert np.array_equal(fc.frames[0], fc.frames[1])
    assert np.array_equal(fc.latents[0], fc.latents[1])
    if structure == "slds":
        assert fc.states.shape == (2, 4)
    other = models.forecast(model, models.ForecastRequest(prefix, horizon=4, n_samples=2, seeds=(7, 8)))
    assert not np.array_equal(other.frames[0], other.frames[1])


def test_noiseless_forecast_is_repeatable():
    model = identity_lds()
    prefix = np.random.default_rng(2).standard_normal((4, 3))
    req = models.ForecastRequest(prefix, horizon=3, noiseless=True)
    a = models.forecast(model, req, np.random.default_rng(0))
    b = models.forecast(model, req, np.random.default_rng(99))
    assert np.array_equal(a.frames, b.frames)


def test_forecast_errors():
    model = identity_lds()
    with pytest.raises(UsageError):
        models.forecast(model, models.ForecastRequest(np.zeros((0, 3)), horizon=2))
    with pytest.raises(UsageError):
        models.ForecastRequest(np.zeros((2, 3)), horizon=0)
    with pytest.raises(UsageError):
        models.ForecastRequest(np.zeros((2, 3)), n_samples=2, seeds=(1,))
    gmm = models.build(models.ModelConfig(structure="gmm", p=3))
    with pytest.raises(UsageError):
        models.forecast(gmm, models.ForecastRequest(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# clustering


def test_symmetric_model_gives_uniform_responsibilities():
    model = models.build(models.ModelConfig(structure="gmm", K=3, m=2, p=2, enc_hidden=(4,), dec_hidden=(4,)))
    eta = dict(pi=ef.dirichlet(np.ones(3)), niw=ef.stack([ef.niw(np.zeros(2), 1.0, 3.0 * np.eye(2), 4.0)] * 3))
    model = model.replace(eta=eta)
    r, labels = models.cluster_assignments(model, np.random.default_rng(0).standard_normal((10, 2)))
    np.testing.assert_allclose(r, 1 / 3, atol=1e-12)
    assert not np.any(labels)


def test_single_cluster_labels():
    model = models.build(models.ModelConfig(structure="gmm", K=1, m=2, p=2, enc_hidden=(4,), dec_hidden=(4,)))
    r, labels = models.cluster_assignments(model, np.random.default_rng(0).standard_normal((10, 2)))
    assert np.all(labels == 0) and np.allclose(r, 1.0)


def test_cluster_assignments_need_a_mixture():
    with pytest.raises(UsageError):
        models.cluster_assignments(identity_lds(), np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# plain GMM baseline


def test_plain_gmm_separates_blobs():
    rng = np.random.default_rng(0)
    centers = np.array([[-4.0, 0.0], [4.0, 0.0], [0.0, 5.0]])
    labels = np.repeat(np.arange(3), 100)
    y = centers[labels] + 0.5 * rng.standard_normal((300, 2))
    g = models.fit_plain_gmm(y, models.ModelConfig(K=3, seed=0))
    assert adjusted_rand_score(labels, g.labels(y)) > 0.99
    assert np.all(np.diff(g.elbo_trace) >= -1e-8 * np.abs(g.elbo_trace[1:]))
    assert np.all(np.isfinite(g.log_density(y)))
    w, mus, _ = g.point_estimate()
    assert w.sum() == pytest.approx(1.0)
    assert min(np.linalg.norm(mus - c, axis=1).min() for c in centers) < 0.2
