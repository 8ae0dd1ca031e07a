"""Mixture analytics against brute-force oracles.

Oracles used here are independent of the code paths they check:
grid quadrature for normalization, the Bayes identity assembled from
forward-kernel and marginal densities, and binomial bands for sampling.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrs.gmm import (
    GaussianMixture,
    ReversePosterior,
    forward_marginal,
    gmm_from_dict,
    gmm_to_dict,
    load_gmm,
    oracle_log_ratio,
    reverse_posterior,
    save_gmm,
    standard_normal,
)
from diffrs.schedule import NoiseSchedule, make_vp_schedule


def grid_quadrature_1d(log_density, lo, hi, n=20001):
    """Trapezoid integral of exp(log_density) on [lo, hi]."""
    xs = np.linspace(lo, hi, n)
    vals = np.exp(log_density(xs[:, None]))
    return np.trapezoid(vals, xs)


def grid_quadrature_2d(log_density, lo, hi, n=601):
    xs = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(xs, xs)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    vals = np.exp(log_density(pts)).reshape(n, n)
    return np.trapezoid(np.trapezoid(vals, xs, axis=1), xs)


def mixture_1d(weights, means, variances):
    return GaussianMixture(
        weights=np.asarray(weights, dtype=float),
        means=np.asarray(means, dtype=float)[:, None],
        covs=np.asarray(variances, dtype=float)[:, None, None],
    )


@pytest.fixture
def gmm_2d():
    rng = np.random.default_rng(7)
    means = rng.normal(size=(3, 2)) * 2.0
    covs = []
    for _ in range(3):
        A = rng.normal(size=(2, 2)) * 0.6
        covs.append(A @ A.T + 0.3 * np.eye(2))
    return GaussianMixture(
        weights=np.array([0.5, 0.3, 0.2]), means=means, covs=np.array(covs)
    )


# ----------------------------------------------------------------------
# log density
# ----------------------------------------------------------------------

def test_standard_normal_at_mode():
    g = standard_normal(1)
    assert g.log_density(np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_symmetric_pair_at_origin():
    g = mixture_1d([0.5, 0.5], [-1.0, 1.0], [1.0, 1.0])
    # both components contribute the standard-normal pdf at distance 1
    expected = -0.5 - 0.5 * np.log(2 * np.pi)
    assert g.log_density(np.zeros(1)) == pytest.approx(expected, abs=1e-12)
    assert g.log_density(np.zeros(1)) == pytest.approx(-1.4189385332046727, abs=1e-10)


def test_density_normalizes_2d(gmm_2d):
    total = grid_quadrature_2d(gmm_2d.log_density, -12.0, 12.0)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_density_normalizes_1d():
    g = mixture_1d([0.3, 0.7], [-2.0, 1.5], [0.4, 2.0])
    total = grid_quadrature_1d(g.log_density, -25.0, 25.0)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_density_batch_matches_single(gmm_2d):
    xs = np.random.default_rng(1).normal(size=(40, 2)) * 3
    batch = gmm_2d.log_density(xs)
    singles = np.array([gmm_2d.log_density(x) for x in xs])
    np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-12)


def test_density_dimension_mismatch(gmm_2d):
    with pytest.raises(ValueError, match="dimension"):
        gmm_2d.log_density(np.zeros(3))


def test_density_finite_far_out(gmm_2d):
    assert np.isfinite(gmm_2d.log_density(np.full(2, 1e6)))


def test_score_matches_finite_differences(gmm_2d):
    x = np.array([0.7, -0.4])
    h = 1e-6
    num = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        num[i] = (gmm_2d.log_density(x + e) - gmm_2d.log_density(x - e)) / (2 * h)
    np.testing.assert_allclose(gmm_2d.score(x), num, rtol=1e-6, atol=1e-8)


# ----------------------------------------------------------------------
# invariant validation
# ----------------------------------------------------------------------

def test_weights_must_sum_to_one():
    with pytest.raises(ValueError, match="sum to 1"):
        mixture_1d([0.5, 0.6], [0.0, 1.0], [1.0, 1.0])


def test_weights_must_be_nonnegative():
    with pytest.raises(ValueError, match="nonnegative"):
        mixture_1d([1.5, -0.5], [0.0, 1.0], [1.0, 1.0])


def test_covariance_must_be_symmetric():
    cov = np.array([[[1.0, 0.5], [-0.5, 1.0]]])
    with pytest.raises(ValueError, match="symmetric"):
        GaussianMixture(weights=np.ones(1), means=np.zeros((1, 2)), covs=cov)


def test_covariance_must_be_psd():
    cov = np.array([[[1.0, 2.0], [2.0, 1.0]]])  # eigenvalues -1, 3
    with pytest.raises(ValueError, match="semidefinite"):
        GaussianMixture(weights=np.ones(1), means=np.zeros((1, 2)), covs=cov)


def test_arrays_are_read_only(gmm_2d):
    with pytest.raises(ValueError):
        gmm_2d.means[0, 0] = 99.0


# ----------------------------------------------------------------------
# forward marginal
# ----------------------------------------------------------------------

def test_forward_marginal_single_component():
    # alpha_bar = 0.25 after two constant beta=0.5 steps
    sched = make_vp_schedule(2, 0.5, 0.5, "constant")
    g0 = mixture_1d([1.0], [2.0], [0.5])
    g2 = forward_marginal(g0, sched, 2)
    assert g2.means[0, 0] == pytest.approx(1.0, abs=1e-14)
    assert g2.covs[0, 0, 0] == pytest.approx(0.875, abs=1e-14)


def test_forward_marginal_t0_is_identity(gmm_2d):
    sched = make_vp_schedule(4, 0.1, 0.4)
    assert forward_marginal(gmm_2d, sched, 0) is gmm_2d


def test_forward_marginal_t_out_of_range(gmm_2d):
    sched = make_vp_schedule(4, 0.1, 0.4)
    with pytest.raises(ValueError, match="timestep"):
        forward_marginal(gmm_2d, sched, 5)


def test_vp_stationarity():
    # N(0, I) is a fixed point of the VP chain at every t
    sched = make_vp_schedule(8, 0.05, 0.5)
    g = standard_normal(2)
    for t in range(sched.T + 1):
        gt = forward_marginal(g, sched, t)
        np.testing.assert_allclose(gt.means, 0.0, atol=1e-15)
        np.testing.assert_allclose(gt.covs[0], np.eye(2), atol=1e-15)


# ----------------------------------------------------------------------
# reverse posterior
# ----------------------------------------------------------------------

def test_reverse_posterior_stationary_normal():
    # with q_t = N(0,1) stationary, the conditional is N(0.9 x, 0.19)
    sched = NoiseSchedule(betas=np.array([0.1, 0.19]), alpha_bars=np.cumprod([0.9, 0.81]))
    g = standard_normal(1)
    for x_next in (np.array([0.0]), np.array([1.7]), np.array([-3.2])):
        post = reverse_posterior(g, sched, 1, x_next)
        assert post.means[0, 0] == pytest.approx(0.9 * x_next[0], abs=1e-12)
        assert post.covs[0, 0, 0] == pytest.approx(0.19, abs=1e-12)


def test_reverse_posterior_bayes_identity(gmm_2d):
    # log post(x_t | x_next) == log q(x_next | x_t) + log q_t(x_t) - log q_{t+1}(x_next)
    sched = make_vp_schedule(6, 0.05, 0.45)
    rng = np.random.default_rng(3)
    for t in (0, 2, 5):
        q_t = forward_marginal(gmm_2d, sched, t)
        q_next = forward_marginal(gmm_2d, sched, t + 1)
        beta = sched.beta(t + 1)
        a = np.sqrt(1 - beta)
        post_engine = ReversePosterior(gmm_2d, sched)
        for _ in range(20):
            x_t = q_t.sample(rng, 1)[0]
            x_next = a * x_t + np.sqrt(beta) * rng.standard_normal(2)
            lhs = post_engine.mixture(t, x_next).log_density(x_t)
            log_kernel = -np.sum((x_next - a * x_t) ** 2) / (2 * beta) - np.log(
                2 * np.pi * beta
            )
            rhs = log_kernel + q_t.log_density(x_t) - q_next.log_density(x_next)
            assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(rhs))


def test_reverse_posterior_batch_density_matches_mixture(gmm_2d):
    sched = make_vp_schedule(6, 0.05, 0.45)
    engine = ReversePosterior(gmm_2d, sched)
    rng = np.random.default_rng(11)
    x_t = rng.normal(size=(15, 2))
    x_next = rng.normal(size=(15, 2))
    batch = engine.log_density(2, x_t, x_next)
    singles = np.array(
        [engine.mixture(2, xn).log_density(xt) for xt, xn in zip(x_t, x_next)]
    )
    np.testing.assert_allclose(batch, singles, atol=1e-10)


def test_reverse_posterior_dominant_weight_far_in_one_basin():
    # far in one mode's basin the posterior weight collapses onto that mode
    g = mixture_1d([0.5, 0.5], [-6.0, 6.0], [0.5, 0.5])
    sched = make_vp_schedule(4, 0.05, 0.2)
    post = reverse_posterior(g, sched, 2, np.array([5.5]))
    assert post.weights.max() > 0.99
    assert post.weights.argmax() == 1


def test_reverse_posterior_sample_batch_matches_distribution(gmm_2d):
    # batched sampler agrees with per-mixture moments
    sched = make_vp_schedule(6, 0.05, 0.45)
    engine = ReversePosterior(gmm_2d, sched)
    x_next = np.array([0.5, -0.8])
    post = engine.mixture(2, x_next)
    rng = np.random.default_rng(5)
    draws = engine.sample_batch(2, np.tile(x_next, (20000, 1)), rng)
    mean_true = (post.weights[:, None] * post.means).sum(axis=0)
    np.testing.assert_allclose(draws.mean(axis=0), mean_true, atol=0.03)


def test_reverse_posterior_zero_beta_rejected():
    g = standard_normal(1)
    sched = NoiseSchedule(betas=np.array([0.0, 0.1]), alpha_bars=np.cumprod([1.0, 0.9]))
    with pytest.raises(ValueError, match="point mass"):
        reverse_posterior(g, sched, 0, np.array([0.3]))


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------

def test_sample_zero_covariance_is_exact():
    g = GaussianMixture(
        weights=np.ones(1), means=np.array([[1.5, -2.0]]), covs=np.zeros((1, 2, 2))
    )
    draws = g.sample(np.random.default_rng(0), 50)
    assert np.all(draws == np.array([1.5, -2.0]))


def test_sample_deterministic_given_seed(gmm_2d):
    a = gmm_2d.sample(np.random.default_rng(42), 100)
    b = gmm_2d.sample(np.random.default_rng(42), 100)
    np.testing.assert_array_equal(a, b)


def test_sample_requires_positive_n(gmm_2d):
    with pytest.raises(ValueError):
        gmm_2d.sample(np.random.default_rng(0), 0)


def test_sample_component_frequencies_in_binomial_bands():
    # well-separated modes let us assign draws to components unambiguously
    g = mixture_1d([0.2, 0.3, 0.5], [-10.0, 0.0, 10.0], [0.25, 0.25, 0.25])
    n = 50000
    draws = g.sample(np.random.default_rng(9), n)[:, 0]
    edges = [-5.0, 5.0]
    counts = np.array(
        [
            (draws < edges[0]).sum(),
            ((draws >= edges[0]) & (draws < edges[1])).sum(),
            (draws >= edges[1]).sum(),
        ]
    )
    for c, w in zip(counts, g.weights):
        sigma = np.sqrt(n * w * (1 - w))
        assert abs(c - n * w) < 3 * sigma


def test_sample_mean_and_cov(gmm_2d):
    draws = gmm_2d.sample(np.random.default_rng(2), 100000)
    mean_true = (gmm_2d.weights[:, None] * gmm_2d.means).sum(axis=0)
    np.testing.assert_allclose(draws.mean(axis=0), mean_true, atol=0.05)


# ----------------------------------------------------------------------
# log ratio
# ----------------------------------------------------------------------

def test_log_ratio_identical_mixtures(gmm_2d):
    x = np.array([0.3, -1.0])
    assert oracle_log_ratio(gmm_2d, gmm_2d, x) == 0.0


def test_log_ratio_known_gaussians():
    q = standard_normal(1)
    p = mixture_1d([1.0], [1.0], [1.0])
    assert oracle_log_ratio(q, p, np.array([0.0])) == pytest.approx(0.5, abs=1e-12)
    assert oracle_log_ratio(q, p, np.array([0.5])) == pytest.approx(0.0, abs=1e-12)


def test_log_ratio_dimension_mismatch(gmm_2d):
    with pytest.raises(ValueError, match="dimension"):
        oracle_log_ratio(gmm_2d, standard_normal(3), np.zeros(2))


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=-50.0, max_value=50.0), st.floats(min_value=-50.0, max_value=50.0))
def test_log_ratio_antisymmetric_and_finite(x0, x1):
    q = GaussianMixture(
        weights=np.array([0.4, 0.6]),
        means=np.array([[0.0, 0.0], [2.0, -1.0]]),
        covs=np.stack([np.eye(2), 0.5 * np.eye(2)]),
    )
    p = GaussianMixture(
        weights=np.array([0.7, 0.3]),
        means=np.array([[1.0, 0.5], [-2.0, 2.0]]),
        covs=np.stack([2.0 * np.eye(2), np.eye(2)]),
    )
    x = np.array([x0, x1])
    r = oracle_log_ratio(q, p, x)
    assert np.isfinite(r)
    assert r == -oracle_log_ratio(p, q, x)


def test_log_ratio_finite_in_deep_tails():
    q = standard_normal(1)
    p = mixture_1d([1.0], [1.0], [1.0])
    r = oracle_log_ratio(q, p, np.array([1e4]))
    assert np.isfinite(r)


# ----------------------------------------------------------------------
# eight-dimensional smoke checks
# ----------------------------------------------------------------------

def test_eight_dimensional_support():
    rng = np.random.default_rng(13)
    means = rng.normal(size=(2, 8))
    covs = np.stack([np.eye(8), 0.5 * np.eye(8)])
    g = GaussianMixture(weights=np.array([0.5, 0.5]), means=means, covs=covs)
    sched = make_vp_schedule(5, 0.05, 0.4)
    g3 = forward_marginal(g, sched, 3)
    x = rng.normal(size=8)
    assert np.isfinite(g3.log_density(x))
    post = reverse_posterior(g, sched, 1, x)
    assert post.weights.sum() == pytest.approx(1.0, abs=1e-12)
    draws = g.sample(rng, 10)
    assert draws.shape == (10, 8)


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------

def test_json_roundtrip(tmp_path, gmm_2d):
    path = tmp_path / "mix.json"
    save_gmm(gmm_2d, path)
    loaded = load_gmm(path)
    np.testing.assert_array_equal(loaded.weights, gmm_2d.weights)
    np.testing.assert_array_equal(loaded.means, gmm_2d.means)
    np.testing.assert_array_equal(loaded.covs, gmm_2d.covs)


def test_json_field_names(gmm_2d):
    obj = gmm_to_dict(gmm_2d)
    assert set(obj) == {"dim", "components"}
    assert set(obj["components"][0]) == {"weight", "mean", "cov"}


def test_json_malformed_rejected():
    with pytest.raises(ValueError, match="malformed"):
        gmm_from_dict({"dim": 2, "components": [{"weight": 1.0}]})


def test_json_dim_mismatch_rejected(gmm_2d):
    obj = gmm_to_dict(gmm_2d)
    obj["dim"] = 5
    with pytest.raises(ValueError, match="dim"):
        gmm_from_dict(obj)
