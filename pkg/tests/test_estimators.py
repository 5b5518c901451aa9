import numpy as np
import pytest
import torch

from fmukf import dataset, sensors, ship
from fmukf import estimators as E
from fmukf.bench import mae_vector
from fmukf.errors import ConfigError, UnknownSensorConfig
from fmukf.seqmodel import SeqModel, SeqModelConfig, fit_norm_stats, save_model
from fmukf.seqmodel.train import TrainConfig
from fmukf.sensors import SensorConfig
from fmukf.ukf import SigmaHistory
from oracles import kalman_filter


@pytest.fixture(scope="module")
def base():
    return ship.base_params()


@pytest.fixture(scope="module")
def traj(base):
    return dataset.generate_trajectory(base, 60, 11)


@pytest.fixture(scope="module")
def stats(traj):
    return fit_norm_stats(traj.states, traj.controls)


@pytest.fixture(scope="module")
def fm_model(stats):
    torch.manual_seed(0)
    return SeqModel(SeqModelConfig.desk(), stats).double().eval()


# ------------------------------------------------------------ process models

def test_cv_zero_velocity(base):
    x = np.zeros(10)
    x[ship.X], x[ship.PSI], x[ship.DELTA], x[ship.N] = 5.0, 0.3, 0.05, 1.0
    out = E.cv_process_model(base).step(x[None], np.array([0.0, 1.2]))[0]
    np.testing.assert_array_equal(out[:8], x[:8])
    assert out[ship.DELTA] < x[ship.DELTA] and out[ship.N] > x[ship.N]


def test_cv_surge_advances_x(base):
    x = np.zeros(10)
    x[ship.U] = 2.0
    out = E.cv_process_model(base).step(x[None], np.zeros(2))[0]
    assert out[ship.X] == pytest.approx(2.0, abs=1e-12)
    assert out[ship.Y] == pytest.approx(0.0, abs=1e-12)


def test_cv_constant_turn(base):
    x = np.zeros(10)
    x[ship.R], x[ship.PHI] = 0.01, 0.2
    out = E.cv_process_model(base).step(x[None], np.zeros(2))[0]
    assert out[ship.PSI] == pytest.approx(0.01 * np.cos(0.2), rel=1e-12)
    assert out[ship.R] == x[ship.R]


def test_oracle_is_the_true_model(base, traj):
    m = E.oracle_process_model(base)
    pts = traj.states[:10].astype(float)
    nxt = m.step(pts, traj.controls[5].astype(float))
    np.testing.assert_array_equal(nxt, ship.step(pts, traj.controls[5], base))


def test_base_differs_on_far_instance(base, traj):
    far = base.with_values(Xuu=base["Xuu"] * 1.3, Nr=base["Nr"] * 0.7, m=base["m"] * 1.2)
    pts = traj.states[10:20].astype(float)
    u = traj.controls[10].astype(float)
    err = np.abs(E.oracle_process_model(far).step(pts, u) - E.base_process_model(base).step(pts, u))
    assert err.max() > 1e-6
    same = E.oracle_process_model(base).step(pts, u)
    np.testing.assert_array_equal(same, E.base_process_model(base).step(pts, u))


def test_midpoint_reduces_to_euler():
    rng = np.random.default_rng(0)
    cur = rng.standard_normal((4, 10))
    out = E.midpoint_pose(cur, cur.copy(), 0.5)
    g = ship.kinematic_rates(cur[:, :4], cur[:, 4:8])
    np.testing.assert_allclose(out[:, 4:8], cur[:, 4:8] + 0.5 * g, rtol=1e-14)


def test_midpoint_order_beats_euler():
    # straight run with smoothly accelerating surge, perfect velocity predictions
    surge = lambda t: 1.0 + 0.3 * t + 0.05 * t ** 2  # noqa: E731
    exact = lambda t: t + 0.15 * t ** 2 + 0.05 / 3 * t ** 3  # noqa: E731
    dts = np.array([1.0, 0.5, 0.25, 0.125])
    mid, eul = [], []
    t0 = 2.0
    for dt in dts:
        cur = np.zeros(10)
        cur[ship.U], cur[ship.X] = surge(t0), exact(t0)
        nxt = cur.copy()
        nxt[ship.U] = surge(t0 + dt)
        m = E.midpoint_pose(cur, nxt, dt)[ship.X]
        mid.append(abs(m - exact(t0 + dt)))
        eul.append(abs(cur[ship.X] + dt * surge(t0) - exact(t0 + dt)))
    assert np.polyfit(np.log(dts), np.log(mid), 1)[0] == pytest.approx(3.0, abs=0.2)
    assert np.polyfit(np.log(dts), np.log(eul), 1)[0] == pytest.approx(2.0, abs=0.2)


def test_fm_integrator_only_touches_pose(fm_model, traj):
    hist = SigmaHistory()
    rng = np.random.default_rng(1)
    for k in range(12):
        hist.append(traj.states[k] + 0.01 * rng.standard_normal((20, 10)), traj.controls[k])
    raw = E.fm_process_model(fm_model, False).predict(hist.points, hist.controls)
    integ = E.fm_process_model(fm_model, True).predict(hist.points, hist.controls)
    assert raw.shape == (20, 10) and np.all(np.isfinite(raw))
    keep = [ship.U, ship.V, ship.P, ship.R, ship.DELTA, ship.N]
    np.testing.assert_array_equal(integ[:, keep], raw[:, keep])
    assert not np.array_equal(integ[:, list(ship.POSE_IDX)], raw[:, list(ship.POSE_IDX)])


def test_fm_angles_stay_continuous(fm_model, traj):
    pts = np.tile(traj.states[:8], (2, 1, 1)).swapaxes(0, 1).astype(float)  # (8, 2, 10)
    pts[:, :, ship.PSI] = 4 * np.pi + np.linspace(0, 0.1, 8)[:, None]
    out = E.fm_process_model(fm_model).predict(pts, traj.controls[:8].astype(float))
    assert np.all(np.abs(out[:, ship.PSI] - pts[-1, :, ship.PSI]) <= np.pi)


# ------------------------------------------------------------ End2End

def test_e2e_slot_encoding(stats):
    enc = E.E2EEncoding(stats)
    assert enc.input_dim == 10 + 8 + 2
    s = np.tile(np.array([7.0, 0.1, 0, 0, 1, 1, 0.1, 0.2, 0, 1.1]), (3, 1))
    u = np.zeros((3, 2))
    h1 = enc.encode(sensors.h(s, sensors.make_sensor("H1")), u, sensors.make_sensor("H1"))
    h2 = enc.encode(sensors.h(s, sensors.make_sensor("H2")), u, sensors.make_sensor("H2"))
    mask1, mask2 = h1[:, 10:18], h2[:, 10:18]
    assert np.all(mask1 == 1)
    assert np.all(mask2[:, :2] == 0) and np.all(mask2[:, 2:] == 1)
    assert np.all(h2[:, :2] == 0) and np.any(h1[:, :2] != 0)
    np.testing.assert_array_equal(h1[:, 2:10], h2[:, 2:10])
    with pytest.raises(UnknownSensorConfig):
        enc.encode(np.zeros((3, 1)), u, SensorConfig("X", (ship.N,), (0.1,)))


def test_e2e_untrained_shapes_and_causality(stats, traj):
    model = E.e2e_model(stats).double().eval()
    for sid in ("H1", "H2"):
        cfg = sensors.make_sensor(sid)
        ys = sensors.measure_sequence(traj.states[:31], cfg, 0)
        est = E.e2e_estimate(model, ys, traj.controls[:31], cfg)
        assert est.shape == (31, 10) and np.all(np.isfinite(est))
        ys2 = ys.copy()
        ys2[17:] += 5.0
        est2 = E.e2e_estimate(model, ys2, traj.controls[:31], cfg)
        np.testing.assert_array_equal(est2[:17], est[:17])
        assert not np.array_equal(est2[17:], est[17:])


def test_e2e_matches_prefix_evaluation(stats, traj):
    model = E.e2e_model(stats).double().eval()
    cfg = sensors.make_sensor("H2")
    ys = sensors.measure_sequence(traj.states[:9], cfg, 1)
    full = E.e2e_estimate(model, ys, traj.controls[:9], cfg)
    for k in range(9):
        pre = E.e2e_estimate(model, ys[:k + 1], traj.controls[:k + 1], cfg)
        np.testing.assert_allclose(pre[-1], full[k], atol=1e-10)


def _toy(n, L, seed, a=0.9, q=0.1):
    rng = np.random.default_rng(seed)
    x = np.zeros((n, L))
    x[:, 0] = rng.standard_normal(n) * np.sqrt(q / (1 - a * a))
    for k in range(1, L):
        x[:, k] = a * x[:, k - 1] + np.sqrt(q) * rng.standard_normal(n)
    return x[..., None], np.zeros((n, L, 1))


def test_e2e_learns_kalman_filter_on_toy():
    a, q, r = 0.9, 0.1, 0.5
    cfg = SensorConfig("T", (0,), (np.sqrt(r),))
    xs, us = _toy(512, 32, 0)
    mcfg = SeqModelConfig(3, 1, embed_dim=32, n_layers=1, n_heads=2, mlp_width=64,
                          residual_block_width=64, dropout=0.0, max_sequence_length=32)
    tcfg = TrainConfig(context_range=(1, 1), noise_x=0, noise_u=0, epochs=60, warmup_epochs=30,
                       decay_every=10, decay_factor=0.6, batch_schedule={0: 32}, micro_batch=32)
    res = E.train_e2e_on_arrays(list(xs), list(us), [cfg], mcfg, tcfg, slots=(0,), angle_idx=())
    xt, ut = _toy(200, 32, 1)
    ys = xt + np.sqrt(r) * np.random.default_rng(5).standard_normal(xt.shape)
    est = E.E2EEstimator(res.model, E.E2EEncoding(res.model.stats, (0,))).estimate(ys, ut, cfg)
    eye = np.eye(1)
    kf = np.array([kalman_filter(a * eye, 0 * eye, eye, q * eye, r * eye, np.zeros(1),
                                 eye * q / (1 - a * a), y, u)[0] for y, u in zip(ys, ut)])
    w = 4
    mse_e2e = np.mean((est[:, w:] - xt[:, w:]) ** 2)
    mse_kf = np.mean((kf[:, w:] - xt[:, w:]) ** 2)
    assert mse_e2e <= 1.2 * mse_kf


# ------------------------------------------------------------ runs

def test_near_noiseless_oracle_tracks(base):
    tr = dataset.generate_trajectory(base, 192, 3)
    cfg = sensors.make_sensor("H1").with_noise(scale=1e-6)
    est = E.run_estimator(E.EstimatorSpec("ORACLE_UKF"), tr, cfg, 0, params=base, q_scale=1e-6)
    assert mae_vector(est, tr.states).max() < 1e-3


@pytest.mark.parametrize("kind", ["ORACLE_UKF", "BASE_UKF", "CV_UKF"])
def test_runs_are_seeded_and_causal(kind, base, traj):
    cfg = sensors.make_sensor("H2")
    spec = E.EstimatorSpec(kind)
    a = E.run_estimator(spec, traj, cfg, 5, params=base)
    b = E.run_estimator(spec, traj, cfg, 5, params=base)
    assert np.array_equal(a, b)
    ys = sensors.measure_sequence(traj.states, cfg, 5)
    assert np.array_equal(E.run_estimator(spec, traj, cfg, 5, params=base, ys=ys), a)
    ys[30:] += 3 * np.asarray(cfg.noise_std)
    c = E.run_estimator(spec, traj, cfg, 5, params=base, ys=ys)
    np.testing.assert_array_equal(c[:30], a[:30])


def test_fm_ukf_run(tmp_path, fm_model, traj, base):
    save_model(fm_model, tmp_path / "fm")
    cfg = sensors.make_sensor("H1")
    for kind in ("FM_UKF", "FM_UKF_INTEGRATOR"):
        est = E.run_estimator(E.EstimatorSpec(kind, model=str(tmp_path / "fm")), traj, cfg, 0,
                              length=20)
        assert est.shape == (20, 10) and np.all(np.isfinite(est))


def test_spec_validation():
    with pytest.raises(ConfigError):
        E.EstimatorSpec("KALMAN")
    with pytest.raises(ConfigError):
        E.EstimatorSpec("FM_UKF")
    assert E.EstimatorSpec("cv_ukf").name == "CV_UKF"
    q = E.EstimatorSpec("CV_UKF", Q=[1.0] * 10).process_noise()
    np.testing.assert_array_equal(q, np.eye(10))


def test_initial_belief(traj):
    cfg = sensors.make_sensor("H2")
    y0 = sensors.h(traj.states[0], cfg)
    b = E.initial_belief(y0, cfg, traj.controls[0])
    np.testing.assert_array_equal(b.mean[list(cfg.observed_indices)], y0)
    assert b.mean[ship.DELTA] == traj.controls[0][0]
    assert b.is_valid()


def test_tune_q_scale_picks_grid_point(base):
    trs = [dataset.generate_trajectory(base, 30, s) for s in (1, 2)]
    best, table = E.tune_q_scale(trs, lambda t: base, [sensors.make_sensor("H2")],
                                 grid=(0.1, 1.0, 10.0))
    assert best in (0.1, 1.0, 10.0)
    assert table[best] == min(table.values())
