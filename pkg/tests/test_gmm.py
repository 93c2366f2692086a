"""Mixture model: densities, posteriors, fitting, reparameterization."""

import logging

import mpmath
import numpy as np
import pytest

from fvlayer.gmm import (
    GmmParams,
    RawGmmParams,
    VARIANCE_FLOOR,
    NU_LIMIT,
    em_fit,
    kmeans_init,
    log_gaussian,
    posterior_grad_input,
    posterior_grad_params,
    posteriors,
    raw_from_params,
    reparam_backward,
    reparam_forward,
)
from fvlayer.gradcheck import fd_jacobian, max_rel_error


def random_params(k, d, rng):
    weights = rng.dirichlet(np.full(k, 4.0))
    means = rng.normal(size=(k, d))
    variances = rng.uniform(0.3, 2.0, size=(k, d))
    return GmmParams(weights=weights, means=means, variances=variances)


def mean_log_likelihood(features, params):
    # independent oracle: direct densities with max-subtraction, no shared code
    t, d = features.shape
    logs = np.empty((t, params.n_components))
    for k in range(params.n_components):
        var = params.variances[k]
        diff = features - params.means[k]
        logs[:, k] = (np.log(params.weights[k])
                      - 0.5 * np.sum(np.log(2.0 * np.pi * var))
                      - 0.5 * np.sum(diff * diff / var, axis=1))
    m = logs.max(axis=1, keepdims=True)
    return float(np.mean(m[:, 0] + np.log(np.exp(logs - m).sum(axis=1))))


# ------------------------------------------------------------- density


def test_log_gaussian_matches_mpmath():
    # oracle: 50-digit evaluation of the same diagonal normal log-density
    rng = np.random.default_rng(3)
    mpmath.mp.dps = 50
    for _ in range(20):
        d = int(rng.integers(1, 5))
        x = rng.normal(size=d)
        mean = rng.normal(size=d)
        var = rng.uniform(0.1, 3.0, size=d)
        expected = mpmath.mpf(0)
        for j in range(d):
            xj, mj, vj = mpmath.mpf(x[j]), mpmath.mpf(mean[j]), mpmath.mpf(var[j])
            expected += (-mpmath.log(2 * mpmath.pi * vj) / 2
                         - (xj - mj) ** 2 / (2 * vj))
        got = log_gaussian(x, mean, var)
        assert abs(got - float(expected)) <= 1e-12 * max(1.0, abs(float(expected)))


def test_log_gaussian_shape_mismatch():
    with pytest.raises(ValueError):
        log_gaussian(np.zeros(2), np.zeros(3), np.ones(3))


# ---------------------------------------------------------- posteriors


def test_posteriors_rows_sum_to_one():
    rng = np.random.default_rng(11)
    for _ in range(10):
        k = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        params = random_params(k, d, rng)
        feats = rng.normal(size=(int(rng.integers(1, 30)), d))
        gamma = posteriors(feats, params)
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(gamma >= 0.0)


def test_posteriors_match_direct_softmax():
    # oracle: unnormalized densities in linear space (safe at this scale)
    rng = np.random.default_rng(5)
    params = random_params(3, 2, rng)
    feats = rng.normal(size=(40, 2))
    dens = np.empty((40, 3))
    for k in range(3):
        var = params.variances[k]
        diff = feats - params.means[k]
        dens[:, k] = (params.weights[k]
                      * np.exp(-0.5 * np.sum(diff * diff / var, axis=1))
                      / np.sqrt(np.prod(2.0 * np.pi * var)))
    expected = dens / dens.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(posteriors(feats, params), expected, rtol=1e-12)


def test_posteriors_survive_extreme_separation():
    # log-domain path: naive linear-space densities underflow to 0/0 here
    params = GmmParams(
        weights=np.array([0.5, 0.5]),
        means=np.array([[0.0], [120.0]]),
        variances=np.array([[0.01], [0.01]]),
    )
    gamma = posteriors(np.array([[0.0], [120.0]]), params)
    assert np.all(np.isfinite(gamma))
    np.testing.assert_allclose(gamma, np.eye(2), atol=1e-200)


# ------------------------------------------------------------- k-means


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(7)
    true_centers = np.array([[-6.0, 0.0], [6.0, 0.0], [0.0, 9.0]])
    feats = np.concatenate(
        [c + 0.2 * rng.normal(size=(50, 2)) for c in true_centers])
    params = kmeans_init(feats, 3, seed=1)
    # match learned means to true centers greedily; blobs are far apart
    found = params.means.copy()
    for c in true_centers:
        i = int(np.argmin(np.linalg.norm(found - c, axis=1)))
        assert np.linalg.norm(found[i] - c) < 0.2
        found[i] = np.inf
    np.testing.assert_allclose(params.weights, 1.0 / 3.0, atol=0.02)


def test_kmeans_assignment_is_locally_optimal():
    # brute force: every point must sit with its nearest learned center
    rng = np.random.default_rng(19)
    feats = rng.normal(size=(60, 3))
    params = kmeans_init(feats, 4, seed=2)
    d2 = ((feats[:, None, :] - params.means[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    counts = np.bincount(assign, minlength=4)
    np.testing.assert_allclose(params.weights, counts / 60.0, atol=1e-12)
    for k in range(4):
        cluster = feats[assign == k]
        np.testing.assert_allclose(params.means[k], cluster.mean(axis=0),
                                   atol=1e-10)


def test_kmeans_needs_enough_distinct_rows():
    feats = np.tile(np.array([[1.0, 2.0]]), (10, 1))
    with pytest.raises(ValueError, match="distinct"):
        kmeans_init(feats, 2, seed=0)


def test_kmeans_variances_floored():
    feats = np.array([[0.0, 0.0], [0.0, 1e-9], [5.0, 0.0], [5.0, 1e-9]])
    params = kmeans_init(feats, 2, seed=0)
    assert np.all(params.variances >= VARIANCE_FLOOR)


# ------------------------------------------------------------------ EM


def test_em_improves_mean_log_likelihood():
    rng = np.random.default_rng(23)
    feats = np.concatenate([
        rng.normal(loc=-2.0, scale=0.5, size=(80, 2)),
        rng.normal(loc=2.0, scale=1.0, size=(80, 2)),
    ])
    init = kmeans_init(feats, 2, seed=3)
    fitted = em_fit(feats, init, seed=3)
    fitted.validate()
    assert mean_log_likelihood(feats, fitted) >= mean_log_likelihood(feats, init) - 1e-12


def test_em_recovers_generating_mixture():
    rng = np.random.default_rng(29)
    feats = np.concatenate([
        rng.normal(loc=[-3.0, 0.0], scale=[0.6, 1.1], size=(400, 2)),
        rng.normal(loc=[3.0, 1.0], scale=[1.0, 0.5], size=(600, 2)),
    ])
    fitted = em_fit(feats, kmeans_init(feats, 2, seed=4), seed=4)
    order = np.argsort(fitted.means[:, 0])
    np.testing.assert_allclose(fitted.weights[order], [0.4, 0.6], atol=0.05)
    np.testing.assert_allclose(fitted.means[order],
                               [[-3.0, 0.0], [3.0, 1.0]], atol=0.15)
    np.testing.assert_allclose(fitted.variances[order],
                               [[0.36, 1.21], [1.0, 0.25]], rtol=0.3)


def test_em_reseeds_starved_component(caplog):
    # second component sits impossibly far away: zero posterior mass
    feats = np.random.default_rng(31).normal(size=(40, 1)) * 1e-2
    init = GmmParams(
        weights=np.array([0.5, 0.5]),
        means=np.array([[0.0], [1e6]]),
        variances=np.array([[1.0], [1.0]]),
    )
    with caplog.at_level(logging.WARNING, logger="fvlayer.gmm"):
        fitted = em_fit(feats, init, max_iter=5, seed=0)
    assert any("starved" in rec.message for rec in caplog.records)
    fitted.validate()
    # the re-seeded mean must have moved onto the data
    assert np.all(np.abs(fitted.means) < 1.0)


# ------------------------------------------------- reparameterization


def test_reparam_round_trip():
    rng = np.random.default_rng(37)
    for _ in range(10):
        params = random_params(int(rng.integers(1, 5)), int(rng.integers(1, 4)), rng)
        back = reparam_forward(raw_from_params(params))
        np.testing.assert_allclose(back.weights, params.weights, rtol=1e-12)
        np.testing.assert_allclose(back.means, params.means, rtol=1e-12)
        np.testing.assert_allclose(back.variances, params.variances, rtol=1e-10)


def test_reparam_always_feasible():
    # any unconstrained setting must map to a valid mixture
    rng = np.random.default_rng(41)
    for _ in range(50):
        raw = RawGmmParams(
            nu=rng.uniform(-50.0, 50.0, size=3),
            zeta=rng.uniform(-40.0, 10.0, size=(3, 2)),
            means=rng.normal(size=(3, 2)),
        )
        params = reparam_forward(raw)
        params.validate()
        assert abs(params.weights.sum() - 1.0) <= 1e-12
        assert np.all(params.variances > VARIANCE_FLOOR * 0.999)


def test_reparam_backward_matches_fd():
    rng = np.random.default_rng(43)
    k, d = 3, 2
    raw = RawGmmParams(
        nu=rng.normal(size=k),
        zeta=rng.normal(size=(k, d)),
        means=rng.normal(size=(k, d)),
    )
    u_w = rng.normal(size=k)
    u_v = rng.normal(size=(k, d))

    def loss(vec):
        r = RawGmmParams(nu=vec[:k], zeta=vec[k:].reshape(k, d),
                         means=raw.means)
        p = reparam_forward(r)
        return np.array([np.dot(u_w, p.weights) + np.sum(u_v * p.variances)])

    x0 = np.concatenate([raw.nu, raw.zeta.ravel()])
    numeric = fd_jacobian(loss, x0)[0]
    d_nu, d_zeta = reparam_backward(raw, u_w, u_v)
    analytic = np.concatenate([d_nu, d_zeta.ravel()])
    assert max_rel_error(analytic, numeric) <= 1e-6


def test_reparam_backward_clips_saturated_weights():
    raw = RawGmmParams(
        nu=np.array([NU_LIMIT + 5.0, 0.0]),
        zeta=np.zeros((2, 1)),
        means=np.zeros((2, 1)),
    )
    d_nu, _ = reparam_backward(raw, np.array([1.0, -1.0]), np.zeros((2, 1)))
    assert d_nu[0] == 0.0  # clipped coordinate carries no gradient


def test_reparam_survives_extreme_zeta():
    # exp must not overflow, and clipped coordinates freeze like nu does
    raw = RawGmmParams(
        nu=np.zeros(2),
        zeta=np.array([[800.0], [-800.0]]),
        means=np.zeros((2, 1)),
    )
    params = reparam_forward(raw)
    params.validate()
    assert np.all(np.isfinite(params.variances))
    _, d_zeta = reparam_backward(raw, np.zeros(2), np.ones((2, 1)))
    np.testing.assert_array_equal(d_zeta, 0.0)


# -------------------------------------------------- posterior gradients


def test_posterior_grads_sum_to_zero():
    # rows of gamma sum to 1, so their derivatives must sum to 0 over k
    rng = np.random.default_rng(47)
    params = random_params(3, 2, rng)
    feats = rng.normal(size=(6, 2))
    g_in = posterior_grad_input(feats, params)
    np.testing.assert_allclose(g_in.sum(axis=1), 0.0, atol=1e-12)
    d_w, d_mu, d_var = posterior_grad_params(feats, params)
    np.testing.assert_allclose(d_w.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(d_mu.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(d_var.sum(axis=1), 0.0, atol=1e-12)


def test_posterior_grad_input_matches_fd():
    rng = np.random.default_rng(53)
    params = random_params(2, 2, rng)
    x = rng.normal(size=2)

    def gam(vec):
        return posteriors(vec[None, :], params)[0]

    numeric = fd_jacobian(gam, x)
    analytic = posterior_grad_input(x[None, :], params)[0]  # (K, D)
    assert max_rel_error(analytic, numeric) <= 1e-6


def test_validate_rejects_bad_params():
    good = GmmParams(weights=np.array([0.4, 0.6]),
                     means=np.zeros((2, 1)),
                     variances=np.ones((2, 1)))
    good.validate()
    with pytest.raises(ValueError):
        GmmParams(weights=np.array([0.5, 0.6]), means=np.zeros((2, 1)),
                  variances=np.ones((2, 1))).validate()
    with pytest.raises(ValueError):
        GmmParams(weights=np.array([0.4, 0.6]), means=np.zeros((2, 1)),
                  variances=np.array([[1.0], [0.0]])).validate()
    with pytest.raises(ValueError):
        GmmParams(weights=np.array([0.4, 0.6]), means=np.zeros((3, 1)),
                  variances=np.ones((2, 1))).validate()
