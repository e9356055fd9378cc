import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beacon import flow as fl
from beacon.design import WellDesignState
from beacon.oracle import (LinGaussModel, ensemble_stats, lin_gauss_eig, lin_gauss_posterior, mc_eig_bound, rmse)
from beacon.sim import PlumeEnsemble
from beacon.twin import TrainingPair


def spd(rng, d):
    B = rng.standard_normal((d, d))
    return B @ B.T / d + 0.3 * np.eye(d)


def test_rmse():
    assert rmse(np.zeros(4), np.array([1.0, -1, 1, -1])) == 1.0
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))


def test_ensemble_stats():
    members = [np.zeros((2, 2)), np.ones((2, 2)) * 2]
    mean, std, m = ensemble_stats(members)
    np.testing.assert_allclose(mean, 1.0)
    np.testing.assert_allclose(std, np.sqrt(2.0))
    assert m == pytest.approx(np.sqrt(2.0))
    ens = PlumeEnsemble(members, [np.zeros((2, 2))] * 2, 0)
    assert ensemble_stats(ens)[2] == m
    with pytest.raises(ValueError):
        ensemble_stats([np.zeros((2, 2))])


def test_scalar_posterior_hand_value():
    model = LinGaussModel(np.array([[1.0]]), np.zeros(1), np.eye(1), 1.0)
    mean, cov = lin_gauss_posterior(model, np.array([2.0]))
    assert mean[0] == pytest.approx(1.0)
    assert cov[0, 0] == pytest.approx(0.5)
    assert lin_gauss_eig(model) == pytest.approx(0.5 * np.log(2.0))


def test_posterior_matches_gaussian_conditioning():
    # independent route: condition the joint Gaussian of (x, y)
    rng = np.random.default_rng(0)
    d, m = 5, 3
    A = rng.standard_normal((m, d))
    S = spd(rng, d)
    mu = rng.standard_normal(d)
    model = LinGaussModel(A, mu, S, 0.4)
    y = rng.standard_normal(m)
    Syy = A @ S @ A.T + 0.4 * np.eye(m)
    K = S @ A.T @ np.linalg.inv(Syy)
    mean, cov = lin_gauss_posterior(model, y)
    np.testing.assert_allclose(mean, mu + K @ (y - A @ mu), atol=1e-10)
    np.testing.assert_allclose(cov, S - K @ A @ S, atol=1e-10)


def test_eig_equals_entropy_drop():
    rng = np.random.default_rng(1)
    model = LinGaussModel(rng.standard_normal((4, 6)), np.zeros(6), spd(rng, 6), 0.2)
    _, cov = lin_gauss_posterior(model, np.zeros(4))
    drop = 0.5 * (np.linalg.slogdet(model.prior_cov)[1] - np.linalg.slogdet(cov)[1])
    assert lin_gauss_eig(model) == pytest.approx(drop, rel=1e-10)


def test_eig_mask_rows_and_monotone():
    rng = np.random.default_rng(2)
    model = LinGaussModel(rng.standard_normal((4, 3)), np.zeros(3), spd(rng, 3), 0.5)
    assert lin_gauss_eig(model, []) == 0.0
    one = lin_gauss_eig(model, [0])
    two = lin_gauss_eig(model, np.array([True, True, False, False]))
    assert 0 < one < two < lin_gauss_eig(model)


def test_model_validation():
    with pytest.raises(ValueError):
        LinGaussModel(np.eye(2), np.zeros(3), np.eye(3), 1.0)
    with pytest.raises(ValueError):
        LinGaussModel(np.eye(2), np.zeros(2), np.eye(2), 0.0)
    with pytest.raises(ValueError):
        LinGaussModel(np.eye(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)


def test_sample_moments():
    rng = np.random.default_rng(3)
    S = spd(rng, 3)
    model = LinGaussModel(np.eye(3), np.array([1.0, -1.0, 0.5]), S, 0.1)
    x, y = model.sample(40_000, 0)
    np.testing.assert_allclose(x.mean(axis=0), model.prior_mean, atol=0.03)
    np.testing.assert_allclose(np.cov(x.T), S, atol=0.05)
    np.testing.assert_allclose(np.var(y - x, axis=0), 0.1, rtol=0.05)


def test_mc_eig_bound_identity_flow():
    p = fl.flow_init(0, (2, 2), n_couplings=2, hidden=4, embed_dim=2, cond_hidden=4)
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal((2, 2)) for _ in range(5)]
    pairs = [TrainingPair(x, x.copy()) for x in xs]
    bound = mc_eig_bound(p, pairs, WellDesignState.uniform(2), 3, 0)
    # identity map with zero log-scale: -0.5 * mean ||x||^2
    assert bound == pytest.approx(-0.5 * np.mean([np.sum(x * x) for x in xs]))
    with pytest.raises(ValueError):
        mc_eig_bound(p, [], WellDesignState.uniform(2), 3, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 5.0))
def test_posterior_shrinks_property(seed, noise):
    rng = np.random.default_rng(seed)
    model = LinGaussModel(rng.standard_normal((3, 3)), np.zeros(3), spd(rng, 3), noise)
    _, cov = lin_gauss_posterior(model, rng.standard_normal(3))
    assert np.all(np.linalg.eigvalsh(model.prior_cov - cov) > -1e-10)
    assert lin_gauss_eig(model) >= 0.0
