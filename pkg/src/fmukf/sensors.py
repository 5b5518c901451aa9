"""Analytic sensor models with additive Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import ship
from .errors import UnknownSensorConfig

H1_INDICES = (ship.U, ship.V, ship.P, ship.R, ship.X, ship.Y, ship.PHI, ship.PSI)
H2_INDICES = (ship.P, ship.R, ship.X, ship.Y, ship.PHI, ship.PSI)

# per-state noise std: velocities m/s, rates rad/s, positions m, angles rad
DEFAULT_NOISE_STD = {
    "u": 0.05, "v": 0.05,
    "p": 0.005, "r": 0.005,
    "x": 1.0, "y": 1.0,
    "phi": 0.01, "psi": 0.01,
}


def wrap_angle(a):
    """Wrap to (-pi, pi]; values already in range pass through bit-exact."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


@dataclass(frozen=True)
class SensorConfig:
    id: str
    observed_indices: tuple
    noise_std: tuple
    seed: int = 0

    def __post_init__(self):
        if len(self.noise_std) != len(self.observed_indices):
            raise ValueError("one noise std per observed channel")
        if any(s <= 0 for s in self.noise_std):
            raise ValueError("noise_std must be strictly positive")

    @property
    def dim(self) -> int:
        return len(self.observed_indices)

    @property
    def angle_mask(self) -> np.ndarray:
        return np.array([i in ship.ANGLE_IDX for i in self.observed_indices])

    @property
    def R(self) -> np.ndarray:
        return np.diag(np.square(self.noise_std))

    @property
    def selection_matrix(self) -> np.ndarray:
        H = np.zeros((self.dim, ship.STATE_DIM))
        H[np.arange(self.dim), list(self.observed_indices)] = 1.0
        return H

    def with_noise(self, scale: float | None = None, **overrides) -> "SensorConfig":
        names = [ship.STATE_NAMES[i] for i in self.observed_indices]
        std = [overrides.get(n, s) for n, s in zip(names, self.noise_std)]
        if scale is not None:
            std = [s * scale for s in std]
        return replace(self, noise_std=tuple(float(s) for s in std))

    def to_dict(self) -> dict:
        names = [ship.STATE_NAMES[i] for i in self.observed_indices]
        return {"id": self.id, "noise_std": dict(zip(names, self.noise_std)), "seed": self.seed}


def make_sensor(sensor_id: str, noise_std: Mapping[str, float] | None = None,
                seed: int = 0) -> SensorConfig:
    """Build ``"H1"`` or ``"H2"`` with optional per-channel noise overrides."""
    key = sensor_id.upper()
    if key == "H1":
        idx = H1_INDICES
    elif key == "H2":
        idx = H2_INDICES
    else:
        raise UnknownSensorConfig(sensor_id)
    stds = dict(DEFAULT_NOISE_STD)
    stds.update(noise_std or {})
    return SensorConfig(key, idx, tuple(float(stds[ship.STATE_NAMES[i]]) for i in idx), seed)


def sensor_from_dict(d: Mapping) -> SensorConfig:
    return make_sensor(d["id"], d.get("noise_std"), d.get("seed", 0))


@dataclass(frozen=True)
class Measurement:
    values: np.ndarray
    k: int
    config_id: str = field(default="")


def h(state, cfg: SensorConfig) -> np.ndarray:
    """Noise-free measurement: observed components, angles wrapped."""
    s = np.asarray(state, dtype=float)
    y = s[..., list(cfg.observed_indices)]
    mask = cfg.angle_mask
    if mask.any():
        y = y.copy()
        y[..., mask] = wrap_angle(y[..., mask])
    return y


def measure(state, cfg: SensorConfig, rng: np.random.Generator, k: int = 0) -> Measurement:
    """``h(state)`` plus independent zero-mean Gaussian noise per channel."""
    clean = h(state, cfg)
    noise = rng.standard_normal(clean.shape) * np.asarray(cfg.noise_std)
    return Measurement(clean + noise, k, cfg.id)


def measure_sequence(states, cfg: SensorConfig, seed: int) -> np.ndarray:
    """Measurements for a whole trajectory from one rng stream, step by step.

    Every estimator evaluated on the same (trajectory, sensor, seed) sees
    these exact values.
    """
    rng = np.random.default_rng(seed)
    states = np.asarray(states, dtype=float)
    return np.stack([measure(s, cfg, rng, k).values for k, s in enumerate(states)])
