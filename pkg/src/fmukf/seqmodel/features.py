"""Feature transforms: sin/cos expansion of angles and standard scaling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import ship
from ..errors import StatsNotFitted


def expand_angles(states, angle_idx) -> np.ndarray:
    """Replace each angle column in place by the pair (sin, cos)."""
    s = np.asarray(states, dtype=float)
    cols = []
    for j in range(s.shape[-1]):
        if j in angle_idx:
            cols += [np.sin(s[..., j]), np.cos(s[..., j])]
        else:
            cols.append(s[..., j])
    return np.stack(cols, axis=-1)


def collapse_angles(expanded, angle_idx, state_dim: int) -> np.ndarray:
    """Inverse of :func:`expand_angles`; angles come back via arctan2."""
    e = np.asarray(expanded, dtype=float)
    out = np.empty(e.shape[:-1] + (state_dim,))
    c = 0
    for j in range(state_dim):
        if j in angle_idx:
            out[..., j] = np.arctan2(e[..., c], e[..., c + 1])
            c += 2
        else:
            out[..., j] = e[..., c]
            c += 1
    return out


@dataclass
class NormStats:
    """Standard-scaling statistics of the expanded state and of the controls."""

    state_dim: int
    angle_idx: tuple
    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray

    def __post_init__(self):
        self.angle_idx = tuple(int(i) for i in self.angle_idx)
        for k in ("state_mean", "state_std", "control_mean", "control_std"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=float))
        if np.any(self.state_std <= 0) or np.any(self.control_std <= 0):
            raise ValueError("standard deviations must be strictly positive")

    @property
    def expanded_dim(self) -> int:
        return self.state_dim + len(self.angle_idx)

    @property
    def control_dim(self) -> int:
        return len(self.control_mean)

    def to_dict(self) -> dict:
        return {"state_dim": self.state_dim, "angle_idx": list(self.angle_idx),
                "state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
                "control_mean": self.control_mean.tolist(),
                "control_std": self.control_std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(d["state_dim"], tuple(d["angle_idx"]), d["state_mean"], d["state_std"],
                   d["control_mean"], d["control_std"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _safe_std(x, axis=0):
    s = np.std(x, axis=axis)
    return np.where(s > 1e-12, s, 1.0)


def fit_norm_stats(states, controls, angle_idx=ship.ANGLE_IDX) -> NormStats:
    """Fit scaling stats on stacked (N, d) training states and (N, du) controls.

    Constant features get std 1 so they encode to zero.
    """
    states = np.asarray(states, dtype=float).reshape(-1, np.shape(states)[-1])
    controls = np.asarray(controls, dtype=float).reshape(-1, np.shape(controls)[-1])
    angle_idx = tuple(i for i in angle_idx if i < states.shape[-1])
    e = expand_angles(states, angle_idx)
    return NormStats(states.shape[-1], angle_idx, e.mean(axis=0), _safe_std(e),
                     controls.mean(axis=0), _safe_std(controls))


def _require(stats):
    if stats is None:
        raise StatsNotFitted("normalization statistics have not been fitted")


def encode_states(states, stats: NormStats) -> np.ndarray:
    _require(stats)
    return (expand_angles(states, stats.angle_idx) - stats.state_mean) / stats.state_std


def decode_states(z, stats: NormStats) -> np.ndarray:
    _require(stats)
    e = np.asarray(z, dtype=float) * stats.state_std + stats.state_mean
    return collapse_angles(e, stats.angle_idx, stats.state_dim)


def encode_controls(controls, stats: NormStats) -> np.ndarray:
    _require(stats)
    return (np.asarray(controls, dtype=float) - stats.control_mean) / stats.control_std


def encode_features(states, controls, stats: NormStats) -> np.ndarray:
    """Model inputs ``concat(scaled expanded state, scaled control)`` per step."""
    return np.concatenate([encode_states(states, stats), encode_controls(controls, stats)],
                          axis=-1)


def pad_and_mask(seq, p: int, rng: np.random.Generator | None = None,
                 r: int | None = None) -> np.ndarray:
    """Left-pad with zero rows to a multiple of ``p``; optionally zero the first ``r`` rows.

    ``r`` is drawn uniformly from {0, ..., p-1} when an ``rng`` is given
    (training); without either, no masking happens (inference).
    """
    seq = np.asarray(seq)
    L = seq.shape[-2]
    pad = (-L) % p
    if pad:
        zeros = np.zeros(seq.shape[:-2] + (pad, seq.shape[-1]), dtype=seq.dtype)
        seq = np.concatenate([zeros, seq], axis=-2)
    else:
        seq = seq.copy()
    if r is None and rng is not None:
        r = int(rng.integers(p))
    if r:
        seq[..., :r, :] = 0
    return seq
