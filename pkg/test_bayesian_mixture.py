#!/usr/bin/env python3
"""
Tests for the variational Gaussian mixture, its predictive router and k-means
"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln
from sklearn.mixture import GaussianMixture

from bayesian_mixture import (ELBO_SLACK, VARIANCE_FLOOR, GmmPosterior, GmmPrior, classification_entropy,
                              classify, classify_batch, collapsed_log_joint, default_prior, fit_vi,
                              kmeans_fit, load_posterior, nearest_centroid, partition,
                              posterior_predictive_logprobs, save_posterior)
from mixft_errors import ConfigError, DataError, ShapeError


def _two_clusters(n=400, gap=10.0, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 0] = -gap, gap
    Z = np.vstack([rng.standard_normal((n, dim)) + c for c in centers])
    truth = np.repeat([0, 1], n)
    return Z, truth, centers


def _agreement(a, b, K):
    counts = np.zeros((K, K))
    for i, j in zip(a, b):
        counts[i, j] += 1
    rows, cols = linear_sum_assignment(-counts)
    return counts[rows, cols].sum() / len(a)


def test_default_prior_values():
    Z = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]])
    prior = default_prior(Z, 4)
    assert np.allclose(prior.mean, [2.0, 4.0])
    assert np.allclose(prior.scale, np.var(Z, axis=0, ddof=1))
    assert prior.kappa == 1.0 and prior.nu == 2.0
    assert np.allclose(prior.alpha, 0.25)


def test_default_prior_floors_flat_dimension():
    Z = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    assert default_prior(Z, 2).scale[1] == VARIANCE_FLOOR


def test_prior_validation():
    with pytest.raises(ConfigError):
        GmmPrior(np.zeros(2), 1.0, 2.0, np.array([1.0, 0.0]), np.ones(2))
    with pytest.raises(ShapeError):
        GmmPrior(np.zeros(2), 1.0, 2.0, np.ones(3), np.ones(2))


def test_fit_vi_argument_errors():
    Z = np.random.default_rng(0).standard_normal((10, 2))
    with pytest.raises(ConfigError):
        fit_vi(Z, 2, tol=0.0)
    with pytest.raises(DataError):
        fit_vi(Z[:2], 2)
    with pytest.raises(ShapeError):
        fit_vi(Z[:, 0], 2)


def test_single_component_takes_everything():
    Z = np.random.default_rng(1).standard_normal((50, 3))
    result = fit_vi(Z, 1)
    assert np.allclose(result.responsibilities, 1.0)
    labels, log_probs = classify_batch(Z, result.posterior)
    assert np.all(labels == 0)
    assert np.allclose(log_probs, 0.0)


def test_separated_clusters_are_recovered():
    Z, truth, centers = _two_clusters()
    result = fit_vi(Z, 2)
    post = result.posterior

    assert result.posterior.converged
    assert result.responsibilities.max(axis=1).min() > 0.999
    assert _agreement(result.responsibilities.argmax(axis=1), truth, 2) == 1.0

    order = np.argsort(post.mean[:, 0])
    for k, truth_k in zip(order, (0, 1)):
        assert np.allclose(post.mean[k], Z[truth == truth_k].mean(axis=0), atol=0.1)
        assert np.allclose(post.mean[k], centers[truth_k], atol=0.3)


def test_elbo_never_decreases():
    rng = np.random.default_rng(2)
    Z = np.vstack([rng.normal(0, 1, (60, 2)), rng.normal(2.5, 1, (60, 2)), rng.normal(-3, 0.5, (40, 2))])
    trace = np.asarray(fit_vi(Z, 3, tol=1e-10, max_iters=200).posterior.elbo_trace)
    assert len(trace) > 2
    assert np.all(np.diff(trace) >= -ELBO_SLACK * np.abs(trace[:-1]))


def test_mass_is_conserved():
    Z = np.random.default_rng(3).standard_normal((40, 2))
    result = fit_vi(Z, 3)
    post = result.posterior
    assert math.isclose(post.alpha.sum() - post.prior.alpha.sum(), 40.0, rel_tol=1e-9)
    assert np.allclose(result.responsibilities.sum(axis=1), 1.0)


def test_agrees_with_independent_em():
    Z, truth, _ = _two_clusters(n=150, gap=4.0, seed=4)
    ours = fit_vi(Z, 2).responsibilities.argmax(axis=1)
    em = GaussianMixture(2, covariance_type="diag", random_state=0).fit(Z).predict(Z)
    assert _agreement(ours, em, 2) > 0.99
    assert _agreement(ours, truth, 2) > 0.97


def _sequential_log_joint(Z, labels, prior):
    """Chain rule over points: Dirichlet-multinomial label terms and Student-t data terms"""
    K = prior.num_components
    counts = np.zeros(K)
    kappa = np.full(K, prior.kappa)
    mean = np.tile(prior.mean, (K, 1))
    a = np.full(K, prior.nu / 2.0)
    b = np.tile(prior.scale / 2.0, (K, 1))
    total = 0.0
    for i, (z, k) in enumerate(zip(Z, labels)):
        total += math.log((prior.alpha[k] + counts[k]) / (prior.alpha.sum() + i))
        scale = np.sqrt(b[k] * (kappa[k] + 1.0) / (a[k] * kappa[k]))
        total += stats.t.logpdf(z, df=2.0 * a[k], loc=mean[k], scale=scale).sum()
        b[k] = b[k] + kappa[k] * (z - mean[k]) ** 2 / (2.0 * (kappa[k] + 1.0))
        mean[k] = (kappa[k] * mean[k] + z) / (kappa[k] + 1.0)
        kappa[k] += 1.0
        a[k] += 0.5
        counts[k] += 1
    return total


@given(st.lists(st.integers(0, 2), min_size=6, max_size=6))
def test_collapsed_joint_matches_sequential_predictive(labels):
    Z = np.random.default_rng(5).normal(size=(6, 2)) * 2.0
    prior = GmmPrior(np.array([0.1, -0.2]), 0.7, 2.5, np.array([1.3, 0.6]), np.array([0.5, 1.0, 2.0]))
    assert math.isclose(collapsed_log_joint(Z, labels, prior), _sequential_log_joint(Z, labels, prior),
                        rel_tol=1e-9, abs_tol=1e-9)


def test_collapsed_joint_enumeration_is_symmetric_in_labels():
    Z = np.random.default_rng(6).normal(size=(5, 1))
    prior = default_prior(Z, 2)
    for labels in itertools.product(range(2), repeat=5):
        flipped = [1 - c for c in labels]
        assert math.isclose(collapsed_log_joint(Z, labels, prior),
                            collapsed_log_joint(Z, flipped, prior), rel_tol=1e-12)


def test_collapsed_joint_normalizes_over_labelings_with_one_point():
    z = np.array([[0.4]])
    prior = GmmPrior(np.zeros(1), 1.0, 3.0, np.ones(1), np.array([0.3, 0.7]))
    joint = [collapsed_log_joint(z, [k], prior) for k in range(2)]
    marginal = stats.t.logpdf(0.4, df=3.0, scale=math.sqrt(2.0 / 3.0))
    assert math.isclose(np.logaddexp(*joint), marginal, rel_tol=1e-9)


def _blocks(labels):
    return {frozenset(np.flatnonzero(np.asarray(labels) == k).tolist()) for k in set(labels)}


@pytest.mark.parametrize("seed,sizes", [(0, (3, 3)), (1, (2, 4)), (2, (4, 3)), (3, (2, 2))])
def test_vi_hard_assignment_matches_enumerated_map(seed, sizes):
    rng = np.random.default_rng(seed)
    Z = np.concatenate([rng.normal(-4.0, 0.3, sizes[0]), rng.normal(4.0, 0.3, sizes[1])])[:, None]
    prior = GmmPrior(np.zeros(1), 1.0, 1.0, np.ones(1), np.ones(2))

    best = max(itertools.product(range(2), repeat=Z.shape[0]),
               key=lambda labels: collapsed_log_joint(Z, labels, prior))
    fitted = fit_vi(Z, 2, prior).responsibilities.argmax(axis=1)
    assert _blocks(fitted) == _blocks(best)
    assert _blocks(best) == _blocks(np.repeat([0, 1], sizes))


def test_predictive_probabilities_sum_to_one():
    Z, _, _ = _two_clusters(n=50, gap=3.0)
    post = fit_vi(Z, 2).posterior
    for predictive in ("student_t", "plugin"):
        _, log_probs = classify_batch(Z, post, predictive)
        assert np.allclose(np.exp(log_probs).sum(axis=1), 1.0)


def test_unknown_predictive_rejected():
    Z, _, _ = _two_clusters(n=20)
    with pytest.raises(ConfigError):
        classify_batch(Z, fit_vi(Z, 2).posterior, "bogus")


def test_mirror_data_midpoint_is_ambiguous():
    half = np.random.default_rng(7).normal(size=(80, 2)) + np.array([5.0, 0.0])
    Z = np.vstack([half, -half])
    post = fit_vi(Z, 2).posterior
    probs = np.exp(posterior_predictive_logprobs(np.zeros(2), post))
    assert np.allclose(probs, 0.5, atol=1e-3)


def _identical_posterior(K=3, dim=2):
    prior = GmmPrior(np.zeros(dim), 1.0, float(dim), np.ones(dim), np.full(K, 1.0 / K))
    return GmmPosterior(prior, np.zeros((K, dim)), np.full(K, 3.0), np.full(K, 4.0),
                        np.ones((K, dim)), np.full(K, 2.0))


def test_ties_go_to_lowest_index():
    assignment = classify(np.array([0.3, -0.1]), _identical_posterior())
    assert assignment.component == 0
    assert np.allclose(assignment.probs, 1.0 / 3.0)


def test_classify_checks_dimension():
    with pytest.raises(ShapeError):
        classify(np.zeros(3), _identical_posterior())


def test_classification_entropy():
    assert math.isclose(classification_entropy([0.999, 0.001]), 0.0114, abs_tol=1e-4)
    assert math.isclose(classification_entropy([0.25] * 4), 2.0)
    assert classification_entropy([1.0, 0.0]) == 0.0


def test_partition_reports_empty_components():
    windows = list("abcde")
    result = partition(windows, np.zeros((5, 1)), labels=np.array([0, 0, 2, 2, 2]), num_components=4)
    assert result.subsets[0] == ["a", "b"]
    assert result.subsets[2] == ["c", "d", "e"]
    assert result.empty == [1, 3]


def test_partition_is_disjoint_and_covering():
    Z, _, _ = _two_clusters(n=30)
    post = fit_vi(Z, 2).posterior
    windows = list(range(len(Z)))
    result = partition(windows, Z, post=post)
    assert sorted(itertools.chain.from_iterable(result.subsets)) == windows
    assert result.empty == []


def test_partition_length_mismatch():
    with pytest.raises(ShapeError):
        partition([1, 2], np.zeros((3, 1)), labels=np.zeros(3, dtype=int))


def test_kmeans_with_one_cluster_per_point():
    Z = np.random.default_rng(8).normal(size=(7, 2))
    result = kmeans_fit(Z, 7)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(result.labels.tolist()) == list(range(7))


def test_kmeans_objective_is_monotone():
    Z = np.random.default_rng(9).normal(size=(200, 3))
    trace = np.asarray(kmeans_fit(Z, 5, restarts=1).objective_trace)
    assert np.all(np.diff(trace) <= 1e-9)


def test_kmeans_finds_separated_clusters():
    Z, truth, _ = _two_clusters(n=100)
    result = kmeans_fit(Z, 2, seed=3)
    assert _agreement(result.labels, truth, 2) == 1.0
    assert np.array_equal(nearest_centroid(Z, result.centroids), result.labels)


def test_kmeans_needs_enough_points():
    with pytest.raises(DataError):
        kmeans_fit(np.zeros((2, 1)), 3)


def test_fit_is_permutation_equivariant():
    Z, _, _ = _two_clusters(n=40, gap=3.0, seed=10)
    init = np.eye(2)[(Z[:, 0] > 0).astype(int)]
    order = np.random.default_rng(11).permutation(len(Z))
    a = fit_vi(Z, 2, init_resp=init)
    b = fit_vi(Z[order], 2, init_resp=init[order])
    assert np.allclose(a.posterior.mean, b.posterior.mean)
    assert np.allclose(a.responsibilities[order], b.responsibilities)


def test_posterior_round_trip(tmp_path):
    Z, _, _ = _two_clusters(n=30)
    post = fit_vi(Z, 2).posterior
    loaded = load_posterior(save_posterior(post, tmp_path / "gmm"))
    for name in ("mean", "kappa", "nu", "scale", "alpha"):
        assert np.array_equal(getattr(loaded, name), getattr(post, name))
    assert loaded.elbo_trace == post.elbo_trace
    assert np.array_equal(classify_batch(Z, loaded)[0], classify_batch(Z, post)[0])


def test_dirichlet_normalizer_sanity():
    # one point, one component: the label term vanishes
    prior = GmmPrior(np.zeros(1), 2.0, 2.0, np.ones(1), np.array([1.0]))
    value = collapsed_log_joint(np.array([[0.0]]), [0], prior)
    expected = (gammaln(1.5) - gammaln(1.0) + 1.0 * math.log(0.5) - 1.5 * math.log(0.5)
                + 0.5 * math.log(2.0 / 3.0) - 0.5 * math.log(2 * math.pi))
    assert math.isclose(value, expected, rel_tol=1e-12)


def test_elbo_monotone_on_wide_embeddings():
    rng = np.random.default_rng(12)
    centers = rng.normal(scale=3.0, size=(2, 16))
    Z = np.vstack([rng.normal(size=(500, 16)) + c for c in centers])
    post = fit_vi(Z, 2, max_iters=500).posterior
    trace = np.asarray(post.elbo_trace)
    assert post.converged and post.iterations <= 500
    assert np.all(np.diff(trace) >= -ELBO_SLACK * np.abs(trace[:-1]))


def test_both_partitioners_recover_six_sigma_clusters():
    Z, truth, _ = _two_clusters(n=100, gap=6.0, seed=13)
    vi = fit_vi(Z, 2)
    km = kmeans_fit(Z, 2, seed=0)
    assert _agreement(vi.responsibilities.argmax(axis=1), truth, 2) == 1.0
    assert _agreement(km.labels, truth, 2) == 1.0
    for k in range(2):
        members = Z[vi.responsibilities.argmax(axis=1) == k]
        assert np.allclose(vi.posterior.mean[k], members.mean(axis=0), atol=0.1)
