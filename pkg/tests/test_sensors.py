import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmukf import sensors, ship
from fmukf.errors import UnknownSensorConfig
from fmukf.sensors import h, make_sensor, measure, wrap_angle


STATE = np.array([7.1, 0.2, 0.001, 0.004, 120.0, -35.0, 0.05, 1.3, 0.02, 1.1])


def test_h1_selects_eight_channels():
    np.testing.assert_array_equal(h(STATE, make_sensor("H1")), STATE[:8])


def test_h2_drops_surge_and_sway():
    cfg = make_sensor("H2")
    assert cfg.dim == 6
    np.testing.assert_array_equal(h(STATE, cfg), STATE[2:8])


def test_heading_is_wrapped():
    s = STATE.copy()
    s[ship.PSI] = 2 * np.pi + 0.1
    assert h(s, make_sensor("H1"))[-1] == pytest.approx(0.1, abs=1e-12)


@given(st.floats(-1e4, 1e4))
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-9) and np.isclose(np.sin(w), np.sin(a), atol=1e-9)


def test_tiny_noise_is_exact():
    cfg = make_sensor("H1").with_noise(scale=1e-300)
    y = measure(STATE, cfg, np.random.default_rng(0)).values
    np.testing.assert_array_equal(y, h(STATE, cfg))


def test_empirical_noise_std():
    cfg = make_sensor("H1")
    rng = np.random.default_rng(1)
    states = np.tile(STATE, (100_000, 1))
    states[:, ship.PSI] = 0.3
    ys = measure(states, cfg, rng).values
    std = ys.std(axis=0)
    np.testing.assert_allclose(std, cfg.noise_std, rtol=0.02)


def test_seeds_change_noise_only():
    cfg = make_sensor("H2")
    a = measure(STATE, cfg, np.random.default_rng(1)).values
    b = measure(STATE, cfg, np.random.default_rng(2)).values
    assert not np.array_equal(a, b)
    np.testing.assert_allclose(a, b, atol=6 * max(cfg.noise_std))


def test_measure_sequence_deterministic():
    states = np.tile(STATE, (5, 1))
    cfg = make_sensor("H1")
    a = sensors.measure_sequence(states, cfg, 4)
    assert np.array_equal(a, sensors.measure_sequence(states, cfg, 4))
    assert a.shape == (5, 8)


def test_selection_matrix_and_config_roundtrip():
    cfg = make_sensor("H2", {"x": 2.0}, seed=3)
    np.testing.assert_array_equal(cfg.selection_matrix @ STATE, STATE[2:8])
    back = sensors.sensor_from_dict(cfg.to_dict())
    assert back == cfg
    assert cfg.R[2, 2] == 4.0


def test_invalid_configs():
    with pytest.raises(UnknownSensorConfig):
        make_sensor("H3")
    with pytest.raises(ValueError):
        make_sensor("H1", {"u": 0.0})
