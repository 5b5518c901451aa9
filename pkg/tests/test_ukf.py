import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmukf import sensors, ship
from fmukf.errors import ModelFailure, NotPositiveDefinite
from fmukf.ukf import (UKF, FunctionModel, GaussianBelief, ProcessModel, SigmaHistory,
                       predict, robust_cholesky, sigma_points, unscented_transform, update)
from oracles import kalman_filter, random_stable_system, rel_err, simulate_linear


def random_belief(rng, d):
    G = rng.standard_normal((d, d))
    return GaussianBelief(rng.standard_normal(d), G @ G.T + 0.1 * np.eye(d))


def test_sigma_points_scalar():
    e = sigma_points(GaussianBelief([0.0], [[1.0]]))
    np.testing.assert_allclose(e.points.ravel(), [1.0, -1.0])
    np.testing.assert_allclose(e.w_mu, [0.5, 0.5])


def test_sigma_points_identity_2d():
    e = sigma_points(GaussianBelief(np.zeros(2), np.eye(2)))
    r2 = np.sqrt(2)
    np.testing.assert_allclose(e.points, [[r2, 0], [0, r2], [-r2, 0], [0, -r2]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2 ** 31))
def test_ensemble_reproduces_belief(d, seed):
    b = random_belief(np.random.default_rng(seed), d)
    e = sigma_points(b)
    assert e.w_mu.sum() == pytest.approx(1.0)
    out = unscented_transform(e)
    assert rel_err(out.mean, b.mean) < 1e-12 or np.allclose(out.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(out.cov, b.cov, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_affine_map_exact(d, m, seed):
    rng = np.random.default_rng(seed)
    b = random_belief(rng, d)
    A, c = rng.standard_normal((m, d)), rng.standard_normal(m)
    out = unscented_transform(sigma_points(b), lambda x: x @ A.T + c)
    np.testing.assert_allclose(out.mean, A @ b.mean + c, atol=1e-12)
    np.testing.assert_allclose(out.cov, A @ b.cov @ A.T, atol=1e-12)


def test_square_of_standard_normal():
    out = unscented_transform(sigma_points(GaussianBelief([0.0], [[1.0]])), lambda x: x ** 2)
    assert abs(out.mean[0] - 1.0) < 1e-12


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        sigma_points(GaussianBelief(np.zeros(2), [[1.0, 0.0], [0.0, -1.0]]))
    # a tiny negative eigenvalue is repaired by the jitter retry
    c = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-14]])
    L = robust_cholesky(c)
    assert np.all(np.isfinite(L))


def test_predict_linear_matches_kf():
    rng = np.random.default_rng(0)
    A, B, H, Q, R = random_stable_system(rng, 4)
    b = random_belief(rng, 4)
    u = np.array([0.3])
    pred, ens = predict(b, SigmaHistory(), u, FunctionModel(lambda x, uu: x @ A.T + B @ uu), Q)
    np.testing.assert_allclose(pred.mean, A @ b.mean + B @ u, atol=1e-9)
    np.testing.assert_allclose(pred.cov, A @ b.cov @ A.T + Q, atol=1e-9)
    assert ens.points.shape == (8, 4)


class LastValue(ProcessModel):
    history_conditioned = True

    def predict(self, points_history, controls_history):
        return points_history[-1]


def test_history_last_value_model():
    rng = np.random.default_rng(2)
    b = random_belief(rng, 3)
    Q = 0.01 * np.eye(3)
    pred, _ = predict(b, SigmaHistory(), [0.0], LastValue(), Q)
    np.testing.assert_allclose(pred.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(pred.cov, b.cov + Q, atol=1e-12)


def test_model_failure():
    b = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(ModelFailure):
        predict(b, SigmaHistory(), [0.0], FunctionModel(lambda x, u: x * np.nan), np.eye(2))
    with pytest.raises(ModelFailure):
        predict(b, SigmaHistory(), [0.0], FunctionModel(lambda x, u: x[:1]), np.eye(2))


def test_linear_gaussian_equivalence():
    rng = np.random.default_rng(11)
    for trial in range(5):
        dx = int(rng.integers(1, 5))
        A, B, H, Q, R = random_stable_system(rng, dx, int(rng.integers(1, 4)))
        ys, us = simulate_linear(rng, A, B, H, Q, R, rng.standard_normal(dx), 100)
        prior = GaussianBelief(np.zeros(dx), np.eye(dx))
        f = UKF(FunctionModel(lambda x, u: x @ A.T + u @ B.T), Q, R=R, hfun=lambda x: x @ H.T)
        m, P = f.run(prior, ys, us)
        km, kP = kalman_filter(A, B, H, Q, R, prior.mean, prior.cov, ys, us)
        assert rel_err(m, km) < 1e-6
        assert rel_err(P, kP) < 1e-6


def test_uninformative_measurement():
    rng = np.random.default_rng(3)
    b = random_belief(rng, 10)
    cfg = sensors.make_sensor("H1")
    R = cfg.R * 1e12
    b.mean[ship.PSI] = 0.2
    post = update(b, None, sensors.h(b.mean, cfg) + 1.0, cfg, R)
    assert rel_err(post.mean, b.mean) < 1e-6
    assert rel_err(post.cov, b.cov) < 1e-6


def test_fully_informative_measurement():
    rng = np.random.default_rng(4)
    b = random_belief(rng, 10)
    y = b.mean + rng.standard_normal(10) * 0.1
    post = update(b, None, y, R=1e-12 * np.eye(10), hfun=lambda x: x)
    assert rel_err(post.mean, y) < 1e-6


def test_angle_innovation_wrapped():
    cfg = sensors.make_sensor("H2")
    mean = np.array([7.0, 0, 0, 0, 0, 0, 0, np.pi - 0.01, 0, 1.0])
    b = GaussianBelief(mean, np.diag([1e-2] * 10))
    y = sensors.h(mean, cfg)
    y[-1] = -np.pi + 0.01  # 0.02 rad past the wrap point
    post = update(b, None, y, cfg)
    assert abs(post.mean[ship.PSI] - (np.pi + 0.01)) < 0.02


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_measurement_shrinks_trace(seed):
    rng = np.random.default_rng(seed)
    b = random_belief(rng, 10)
    b.mean[ship.PHI] = 0.0
    b.mean[ship.PSI] = 0.5
    b.cov *= 1e-3
    cfg = sensors.make_sensor("H2")
    post = update(b, None, sensors.h(b.mean, cfg), cfg)
    assert np.trace(post.cov) <= np.trace(b.cov) + 1e-9
    assert post.is_valid()


def test_measurement_ut_matches_linear_h():
    rng = np.random.default_rng(6)
    b = random_belief(rng, 10)
    b.cov *= 1e-4
    b.mean[ship.PSI] = 0.4
    cfg = sensors.make_sensor("H1")
    out = unscented_transform(sigma_points(b), lambda x: sensors.h(x, cfg), cfg.angle_mask)
    Hs = cfg.selection_matrix
    np.testing.assert_allclose(out.mean, Hs @ b.mean, atol=1e-9)
    np.testing.assert_allclose(out.cov, Hs @ b.cov @ Hs.T, atol=1e-9)


def test_history_bookkeeping():
    f = UKF(LastValue(), 0.01 * np.eye(2), R=np.eye(2), hfun=lambda x: x, capacity=5)
    f.initialize(GaussianBelief(np.zeros(2), np.eye(2)))
    f.first(np.zeros(2))
    for k in range(1, 9):
        f.step([0.0], np.zeros(2))
        assert len(f.history) == min(k, 5)
        assert f.history.points.shape == (min(k, 5), 4, 2)
        assert f.history.controls.shape == (min(k, 5), 1)
        assert f.history.per_index(3).shape == (min(k, 5), 2)
