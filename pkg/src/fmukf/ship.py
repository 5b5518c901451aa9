"""Coupled surge/sway/roll/yaw container-ship model.

The hull, propeller and rudder equations follow the nondimensional
formulation of Son & Nomoto (1981) as implemented in the Marine Systems
Simulator (``container.m``).  Numerical values live in
``data/container.json``; this module only holds the equations.

State layout (all modules share it)::

    0 u      surge velocity       m/s
    1 v      sway velocity        m/s
    2 p      roll rate            rad/s
    3 r      yaw rate             rad/s
    4 x      north position       m
    5 y      east position        m
    6 phi    roll angle           rad
    7 psi    heading              rad
    8 delta  rudder angle         rad
    9 n      shaft speed          rev/s

Control layout: ``[delta_c (rad), n_c (rev/s)]``.

Everything here is vectorized over leading batch axes, so a filter can push
all sigma points through one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import Diverged, InvalidParams, NonFiniteState

STATE_NAMES = ("u", "v", "p", "r", "x", "y", "phi", "psi", "delta", "n")
CONTROL_NAMES = ("delta_c", "n_c")
STATE_DIM = 10
CONTROL_DIM = 2

U, V, P, R, X, Y, PHI, PSI, DELTA, N = range(10)
VELOCITY_IDX = (U, V, P, R)
POSE_IDX = (X, Y, PHI, PSI)
ANGLE_IDX = (PHI, PSI)
ACTUATOR_IDX = (DELTA, N)
# indices negated by a port/starboard reflection
LATERAL_IDX = (V, P, R, Y, PHI, PSI, DELTA)

DEFAULT_DT = 1.0
CAPSIZE_ROLL = np.deg2rad(60.0)
# below this speed the nondimensional hull terms are evaluated at this speed
_SPEED_FLOOR = 1e-6

_POSITIVE_KEYS = ("L", "m", "mx", "my", "Ix", "Iz", "Jx", "Jz", "D", "rho",
                  "nabla", "g", "AR", "rudder_time_constant",
                  "delta_max", "delta_rate_max", "n_max")


@dataclass(frozen=True)
class ShipState:
    u: float = 0.0
    v: float = 0.0
    p: float = 0.0
    r: float = 0.0
    x: float = 0.0
    y: float = 0.0
    phi: float = 0.0
    psi: float = 0.0
    delta: float = 0.0
    n: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in STATE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "ShipState":
        return cls(*(float(v) for v in np.asarray(a, dtype=float)))


@dataclass(frozen=True)
class ControlInput:
    delta_c: float = 0.0
    n_c: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.delta_c, self.n_c], dtype=float)


@dataclass(frozen=True)
class ShipParams:
    """Full scalar parameter record of one ship instance."""

    values: Mapping[str, float]
    variation_params: tuple = ()
    instance_id: int = 0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def with_values(self, instance_id: int | None = None, **updates) -> "ShipParams":
        vals = dict(self.values)
        for k, v in updates.items():
            if k not in vals:
                raise KeyError(k)
            vals[k] = float(v)
        return ShipParams(vals, self.variation_params,
                          self.instance_id if instance_id is None else instance_id)

    def validate(self) -> None:
        for k in _POSITIVE_KEYS:
            val = self.values.get(k)
            if val is None or not np.isfinite(val) or val <= 0.0:
                raise InvalidParams(f"parameter {k!r} must be positive, got {val!r}")

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id,
                "params": dict(self.values),
                "variation_params": list(self.variation_params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShipParams":
        return cls({k: float(v) for k, v in d["params"].items()},
                   tuple(d.get("variation_params", ())),
                   int(d.get("instance_id", 0)))

    def vector(self, keys: Sequence[str]) -> np.ndarray:
        return np.array([self.values[k] for k in keys], dtype=float)


def load_params(path: str | Path | None = None) -> ShipParams:
    """Load a parameter file; the bundled container ship when ``path`` is None."""
    if path is None:
        text = resources.files("fmukf").joinpath("data/container.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    params = ShipParams({k: float(v) for k, v in doc["params"].items()},
                        tuple(doc["variation_params"]),
                        int(doc.get("instance_id", 0)))
    params.validate()
    return params


def base_params() -> ShipParams:
    return load_params()


def _mass_terms(pr: ShipParams):
    c = pr._cache
    if "m11" not in c:
        m, mx, my = pr["m"], pr["mx"], pr["my"]
        m22 = m + my
        m32 = -my * pr["ly"]
        m42 = my * pr["alphay"]
        m33 = pr["Ix"] + pr["Jx"]
        m44 = pr["Iz"] + pr["Jz"]
        c.update(m11=m + mx, m22=m22, m32=m32, m42=m42, m33=m33, m44=m44,
                 detM=m22 * m33 * m44 - m32 ** 2 * m44 - m42 ** 2 * m33)
    return c


def kinematic_rates(vel, pose):
    """Rates of ``[x, y, phi, psi]`` given body velocities ``[u, v, p, r]``."""
    vel = np.asarray(vel, dtype=float)
    pose = np.asarray(pose, dtype=float)
    u, v, p, r = (vel[..., i] for i in range(4))
    phi, psi = pose[..., 2], pose[..., 3]
    cphi = np.cos(phi)
    return np.stack([
        np.cos(psi) * u - np.sin(psi) * cphi * v,
        np.sin(psi) * u + np.cos(psi) * cphi * v,
        p,
        cphi * r,
    ], axis=-1)


def actuator_rates(delta, n, delta_c, n_c, pr: ShipParams):
    """First-order actuator lag with magnitude and rate saturation."""
    dmax = pr["delta_max"]
    delta_c = np.clip(delta_c, -dmax, dmax)
    rate_max = pr["delta_rate_max"]
    delta_dot = np.clip((delta_c - delta) / pr["rudder_time_constant"],
                        -rate_max, rate_max)
    nmax = pr["n_max"]
    n_c = np.clip(n_c, -nmax, nmax)
    tm = np.where(n > pr["shaft_tm_threshold"],
                  pr["shaft_tm_coeff"] / np.maximum(n, pr["shaft_tm_threshold"]),
                  pr["shaft_tm_low"])
    n_dot = (n_c - n) / tm
    return delta_dot, n_dot


def derivative(state, control, params: ShipParams, *, check: bool = True) -> np.ndarray:
    """Time derivative of the 10-dimensional state (per-second units).

    Parameters
    ----------
    state : array_like, shape (..., 10)
    control : array_like, shape (..., 2)
        Broadcast against ``state``'s batch axes.
    params : ShipParams
    check : bool
        Validate finiteness of inputs and parameter positivity.
    """
    xs = np.asarray(state, dtype=float)
    us = np.asarray(control, dtype=float)
    if check:
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            raise NonFiniteState("state or control contains NaN/Inf")
        params.validate()
    pr = params
    mt = _mass_terms(pr)

    L = pr["L"]
    u_d, v_d, p_d, r_d = xs[..., U], xs[..., V], xs[..., P], xs[..., R]
    phi, psi, delta, n = xs[..., PHI], xs[..., PSI], xs[..., DELTA], xs[..., N]

    speed = np.sqrt(u_d ** 2 + v_d ** 2)
    Ue = np.maximum(speed, _SPEED_FLOOR)
    q = Ue ** 2

    u = u_d / Ue
    v = v_d / Ue
    p = p_d * L / Ue
    r = r_d * L / Ue

    # propeller and rudder inflow, written so that n -> 0 stays finite
    D = pr["D"]
    uP = np.cos(v) * ((1.0 - pr["wp"]) + pr["tau"] * ((v + pr["xp"] * r) ** 2
                                                     + pr["cpv"] * v + pr["cpr"] * r))
    uP_dim = uP * Ue
    ktn2 = pr["KT0"] * n ** 2 + pr["KT1"] * uP_dim * n / D          # KT * n^2
    ktnabsn = pr["KT0"] * n * np.abs(n) + pr["KT1"] * uP_dim * np.abs(n) / D
    thrust = 2.0 * D ** 4 / (L ** 2 * q) * ktnabsn
    uR = pr["epsilon"] * np.sqrt(np.maximum(
        uP ** 2 + 8.0 * pr["kk"] * ktn2 * D ** 2 / (np.pi * q), 0.0))
    vR = pr["ga"] * v + pr["cRr"] * r + pr["cRrrr"] * r ** 3 + pr["cRrrv"] * r ** 2 * v
    alphaR = delta + np.arctan2(vR, uR)
    dl = pr["Delta"]
    FN = -((6.13 * dl) / (dl + 2.25)) * (pr["AR"] / L ** 2) * (uR ** 2 + vR ** 2) * np.sin(alphaR)

    W = pr["rho"] * pr["g"] * pr["nabla"] / (pr["rho"] * L ** 2 * q / 2.0)
    GM = pr["GM"] / L
    m, mx, my = pr["m"], pr["mx"], pr["my"]
    aH = pr["aH"]
    cd, sd = np.cos(delta), np.sin(delta)

    Xf = (pr["Xuu"] * u ** 2 + (1.0 - pr["t"]) * thrust + pr["Xvr"] * v * r
          + pr["Xvv"] * v ** 2 + pr["Xrr"] * r ** 2 + pr["Xphiphi"] * phi ** 2
          + pr["cRX"] * FN * sd + (m + my) * v * r)

    def lateral(c):
        return (pr[c + "v"] * v + pr[c + "r"] * r + pr[c + "p"] * p + pr[c + "phi"] * phi
                + pr[c + "vvv"] * v ** 3 + pr[c + "rrr"] * r ** 3
                + pr[c + "vvr"] * v ** 2 * r + pr[c + "vrr"] * v * r ** 2
                + pr[c + "vvphi"] * v ** 2 * phi + pr[c + "vphiphi"] * v * phi ** 2
                + pr[c + "rrphi"] * r ** 2 * phi + pr[c + "rphiphi"] * r * phi ** 2)

    Yf = lateral("Y") + (1.0 + aH) * FN * cd - (m + mx) * u * r
    Kf = (lateral("K") - (1.0 + aH) * pr["zR"] * FN * cd + mx * pr["lx"] * u * r
          - W * GM * phi)
    Nf = lateral("N") + (pr["xR"] + aH * pr["xH"]) * FN * cd

    m11, m22, m32, m42 = mt["m11"], mt["m22"], mt["m32"], mt["m42"]
    m33, m44, detM = mt["m33"], mt["m44"], mt["detM"]
    acc = q / L
    rot = q / L ** 2

    out = np.empty(np.broadcast_shapes(xs.shape, us.shape[:-1] + (STATE_DIM,)))
    out[..., U] = Xf * acc / m11
    out[..., V] = -((-m33 * m44 * Yf + m32 * m44 * Kf + m42 * m33 * Nf) / detM) * acc
    out[..., P] = ((-m32 * m44 * Yf + Kf * m22 * m44 - Kf * m42 ** 2 + m32 * m42 * Nf) / detM) * rot
    out[..., R] = ((-m42 * m33 * Yf + m32 * m42 * Kf + Nf * m22 * m33 - Nf * m32 ** 2) / detM) * rot
    out[..., X:PSI + 1] = kinematic_rates(xs[..., :4], xs[..., 4:8])
    out[..., DELTA], out[..., N] = actuator_rates(delta, n, us[..., 0], us[..., 1], pr)
    return out


def step(state, control, params: ShipParams, dt: float = DEFAULT_DT,
         *, check: bool = True) -> np.ndarray:
    """One classical RK4 step of :func:`derivative`.

    The rudder angle is projected onto ``[-delta_max, delta_max]`` afterwards.
    Raises :class:`Diverged` if the result is not finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)
    k1 = derivative(x, control, params, check=check)
    k2 = derivative(x + 0.5 * dt * k1, control, params, check=False)
    k3 = derivative(x + 0.5 * dt * k2, control, params, check=False)
    k4 = derivative(x + dt * k3, control, params, check=False)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    dmax = params["delta_max"]
    out[..., DELTA] = np.clip(out[..., DELTA], -dmax, dmax)
    if not np.all(np.isfinite(out)):
        raise Diverged("RK4 step produced a non-finite state")
    return out


def simulate(params: ShipParams, init, controls, dt: float = DEFAULT_DT) -> np.ndarray:
    """Roll out ``controls`` (shape (L, ..., 2)) from ``init``; returns (L+1, ..., 10)."""
    controls = np.asarray(controls, dtype=float)
    x = np.asarray(init, dtype=float)
    params.validate()
    out = np.empty((len(controls) + 1,) + np.broadcast_shapes(x.shape, controls.shape[1:-1] + (STATE_DIM,)))
    out[0] = x
    for k, uk in enumerate(controls):
        x = step(x, uk, params, dt, check=False)
        out[k + 1] = x
    return out


def mirror_state(state) -> np.ndarray:
    s = np.array(state, dtype=float, copy=True)
    s[..., list(LATERAL_IDX)] *= -1.0
    return s


def mirror_control(control) -> np.ndarray:
    c = np.array(control, dtype=float, copy=True)
    c[..., 0] *= -1.0
    return c


def service_state(params: ShipParams | None = None, speed: float = 7.0,
                  shaft: float = 80.0 / 60.0) -> np.ndarray:
    """Straight-ahead cruise state used as the nominal operating point."""
    s = np.zeros(STATE_DIM)
    s[U] = speed
    s[N] = shaft
    return s


def is_stable(params: ShipParams, probe_inputs, dt: float = DEFAULT_DT,
              horizon: int | None = None, init=None,
              capsize_roll: float = CAPSIZE_ROLL) -> bool:
    """Roll out every probe command sequence and report whether the ship stays upright.

    ``probe_inputs`` is a list of (T, 2) command arrays; ``horizon`` truncates
    them.  Any error, non-finite state or ``|phi| > capsize_roll`` gives False.
    """
    probes = [np.asarray(p, dtype=float) for p in probe_inputs]
    if not probes:
        raise ValueError("probe set must be non-empty")
    try:
        params.validate()
    except InvalidParams:
        return False
    if horizon is not None:
        probes = [p[:horizon] for p in probes]
    if all(len(p) == 0 for p in probes):
        return True
    x0 = service_state(params) if init is None else np.asarray(init, dtype=float)
    # all probes advance together as one batch
    T = max(len(p) for p in probes)
    with np.errstate(all="ignore"):
        x = np.repeat(x0[None, :], len(probes), axis=0)
        alive = np.ones(len(probes), dtype=bool)
        for k in range(T):
            active = np.array([k < len(p) for p in probes]) & alive
            if not active.any():
                break
            uk = np.stack([p[k] if k < len(p) else p[-1] for p in probes])
            k1 = derivative(x, uk, params, check=False)
            k2 = derivative(x + 0.5 * dt * k1, uk, params, check=False)
            k3 = derivative(x + 0.5 * dt * k2, uk, params, check=False)
            k4 = derivative(x + dt * k3, uk, params, check=False)
            nxt = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            nxt[:, DELTA] = np.clip(nxt[:, DELTA], -params["delta_max"], params["delta_max"])
            x = np.where(active[:, None], nxt, x)
            if not np.all(np.isfinite(x[active])):
                return False
            if np.any(np.abs(x[active, PHI]) > capsize_roll):
                return False
    return True
