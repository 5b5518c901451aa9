"""The evaluated observers: UKF variants with different process models and End2End.

Every observer maps a measurement sequence ``y_{0:L-1}`` and the applied
controls ``u_{0:L-1}`` to causal state estimates ``x_{0:L-1}``.  UKF
variants differ only in the process model:

* ``ORACLE_UKF``  true per-instance ship parameters
* ``BASE_UKF``    nominal parameters for every instance
* ``CV_UKF``      constant body velocities, kinematics only
* ``FM_UKF``      pretrained sequence model with sigma-point histories
* ``FM_UKF_INTEGRATOR``  as above, pose re-integrated from predicted velocities

``END2END`` is a sequence model reading (masked) measurements directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import sensors, ship
from .errors import ConfigError, FMUKFError, UnknownSensorConfig
from .seqmodel.features import NormStats, decode_states, encode_controls, encode_states, fit_norm_stats
from .seqmodel.loss import normalized_loss_torch  # noqa: F401  (re-exported for callers)
from .seqmodel.model import SeqModel, SeqModelConfig, load_model, save_model
from .seqmodel.train import TrainConfig, TrainResult, _split_ids, fit, predict_next
from .sensors import SensorConfig, wrap_angle
from .ukf import UKF, FunctionModel, GaussianBelief, ProcessModel

log = logging.getLogger(__name__)

KINDS = ("FM_UKF", "FM_UKF_INTEGRATOR", "ORACLE_UKF", "BASE_UKF", "CV_UKF", "END2END")

# per-step process noise std at unit scale; the tuned scale multiplies the variance.
# Every baseline integrates the pose with exact kinematics, so x, y get little noise.
Q_SHAPE_STD = np.array([0.05, 0.02, 0.002, 0.001, 0.05, 0.05, 0.002, 0.002, 0.005, 0.01])
DEFAULT_Q_SCALE = 1.0

# prior std of components no sensor observes at k = 0
PRIOR_STD = np.array([1.0, 0.5, 0.01, 0.01, 10.0, 10.0, 0.1, 0.3, 0.05, 0.2])


def default_q(scale: float = DEFAULT_Q_SCALE) -> np.ndarray:
    return np.diag(scale * Q_SHAPE_STD ** 2)


# ------------------------------------------------------------ process models

def _kinematic_step(states, control, pr: ship.ShipParams, dt: float):
    """RK4 of pose and actuators with body velocities frozen."""
    vel = states[..., list(ship.VELOCITY_IDX)]

    def rates(s):
        d = np.zeros_like(s)
        d[..., list(ship.POSE_IDX)] = ship.kinematic_rates(vel, s[..., list(ship.POSE_IDX)])
        dd, dn = ship.actuator_rates(s[..., ship.DELTA], s[..., ship.N], control[0], control[1], pr)
        d[..., ship.DELTA] = dd
        d[..., ship.N] = dn
        return d

    k1 = rates(states)
    k2 = rates(states + 0.5 * dt * k1)
    k3 = rates(states + 0.5 * dt * k2)
    k4 = rates(states + dt * k3)
    out = states + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[..., ship.DELTA] = np.clip(out[..., ship.DELTA], -pr["delta_max"], pr["delta_max"])
    return out


def cv_process_model(params: ship.ShipParams | None = None,
                     dt: float = ship.DEFAULT_DT) -> ProcessModel:
    """Constant-velocity model; actuator lag uses ``params`` (nominal by default)."""
    pr = params or ship.base_params()
    return FunctionModel(lambda pts, u: _kinematic_step(np.asarray(pts, dtype=float),
                                                        np.asarray(u, dtype=float), pr, dt))


def _ship_model(params: ship.ShipParams, dt: float) -> ProcessModel:
    def fn(pts, u):
        with np.errstate(all="ignore"):
            return ship.step(pts, u, params, dt, check=False)
    return FunctionModel(fn)


def oracle_process_model(true_params: ship.ShipParams, dt: float = ship.DEFAULT_DT) -> ProcessModel:
    return _ship_model(true_params, dt)


def base_process_model(base: ship.ShipParams | None = None,
                       dt: float = ship.DEFAULT_DT) -> ProcessModel:
    return _ship_model(base or ship.base_params(), dt)


def midpoint_pose(current: np.ndarray, predicted: np.ndarray, dt: float) -> np.ndarray:
    """Replace the predicted pose by midpoint integration of current and predicted velocities.

    ``pose_{k+1} = pose_k + dt/2 * (g(vel_k, pose_k) + g(vel_{k+1}, pose_k))``
    """
    out = np.array(predicted, dtype=float)
    vel_k = current[..., list(ship.VELOCITY_IDX)]
    vel_n = predicted[..., list(ship.VELOCITY_IDX)]
    pose = current[..., list(ship.POSE_IDX)]
    g = ship.kinematic_rates(vel_k, pose) + ship.kinematic_rates(vel_n, pose)
    out[..., list(ship.POSE_IDX)] = pose + 0.5 * dt * g
    return out


class FMProcessModel(ProcessModel):
    """History-conditioned prediction by a dynamics sequence model.

    All ``2 d`` sigma histories are evaluated in one batch.  Angles come
    back from arctan2 in (-pi, pi] and are unwrapped next to the current
    sigma value so the filter state stays continuous.
    """

    history_conditioned = True

    def __init__(self, model: SeqModel, integrator: bool = False, dt: float = ship.DEFAULT_DT):
        self.model = model
        self.integrator = integrator
        self.dt = dt
        self.max_len = model.config.max_sequence_length

    def raw(self, points_history: np.ndarray, controls_history: np.ndarray) -> np.ndarray:
        ph = np.asarray(points_history)[-self.max_len:]
        ch = np.asarray(controls_history)[-self.max_len:]
        states = np.swapaxes(ph, 0, 1)                      # (N, T, d)
        controls = np.broadcast_to(ch, states.shape[:2] + ch.shape[-1:])
        pred = predict_next(self.model, states, controls)
        cur = ph[-1]
        for j in ship.ANGLE_IDX:
            pred[:, j] = cur[:, j] + wrap_angle(pred[:, j] - cur[:, j])
        return pred

    def predict(self, points_history, controls_history):
        pred = self.raw(points_history, controls_history)
        if self.integrator:
            pred = midpoint_pose(np.asarray(points_history)[-1], pred, self.dt)
        return pred


def fm_process_model(model: SeqModel, integrator: bool = False,
                     dt: float = ship.DEFAULT_DT) -> FMProcessModel:
    return FMProcessModel(model, integrator, dt)


# ------------------------------------------------------------ filter setup

def initial_belief(y0, cfg: SensorConfig, u0=None, params: ship.ShipParams | None = None,
                   prior_std=PRIOR_STD, obs_inflation: float = 10.0) -> GaussianBelief:
    """Prior at ``k = 0`` from the first measurement.

    Observed components take the measured value with ``obs_inflation`` times
    the measurement variance; the rest sit at cruise values (actuators at
    the first command when given) with the broad ``prior_std``.
    """
    mean = ship.service_state(params or ship.base_params(), speed=7.3, shaft=70 / 60)
    if u0 is not None:
        mean[ship.DELTA] = u0[0]
        mean[ship.N] = u0[1]
    var = np.square(np.asarray(prior_std, dtype=float)).copy()
    idx = list(cfg.observed_indices)
    mean[idx] = np.asarray(y0, dtype=float)
    var[idx] = obs_inflation * np.square(cfg.noise_std)
    return GaussianBelief(mean, np.diag(var))


def run_ukf(model: ProcessModel, Q, ys, controls, cfg: SensorConfig,
            params: ship.ShipParams | None = None, capacity: int | None = None,
            return_covs: bool = False):
    """Filter one measurement sequence; returns the posterior means (L, 10).

    With ``return_covs`` the posterior covariances (L, 10, 10) are returned
    as a second array.
    """
    ys = np.asarray(ys, dtype=float)
    controls = np.asarray(controls, dtype=float)
    cap = capacity or max(len(ys), 1)
    f = UKF(model, Q, sensor=cfg, capacity=cap)
    f.initialize(initial_belief(ys[0], cfg, controls[0], params))
    out = np.empty((len(ys), ship.STATE_DIM))
    covs = np.empty((len(ys), ship.STATE_DIM, ship.STATE_DIM)) if return_covs else None
    b = f.belief
    for k in range(len(ys)):
        if k:
            b = f.step(controls[k - 1], ys[k])
        out[k] = b.mean
        if return_covs:
            covs[k] = b.cov
    return (out, covs) if return_covs else out


# ------------------------------------------------------------ End2End

@dataclass
class E2EEncoding:
    """Slot layout of the End2End input.

    ``slots`` are the state indices any sensor may observe.  Each slot
    contributes its standardized (sin/cos expanded for angles) columns plus
    one validity flag; controls follow.
    """

    stats: NormStats
    slots: tuple = sensors.H1_INDICES

    def __post_init__(self):
        self.slots = tuple(int(s) for s in self.slots)
        cols, c = {}, 0
        for j in range(self.stats.state_dim):
            w = 2 if j in self.stats.angle_idx else 1
            cols[j] = list(range(c, c + w))
            c += w
        self._cols = cols

    def columns(self, j: int) -> list:
        return self._cols[j]

    @property
    def measurement_dim(self) -> int:
        return sum(len(self._cols[j]) for j in self.slots)

    @property
    def input_dim(self) -> int:
        return self.measurement_dim + len(self.slots) + self.stats.control_dim

    @property
    def output_dim(self) -> int:
        return self.stats.expanded_dim

    def encode(self, ys, controls, cfg: SensorConfig) -> np.ndarray:
        """(..., L, m) measurements of ``cfg`` -> (..., L, input_dim)."""
        obs = tuple(cfg.observed_indices)
        if any(j not in self.slots for j in obs):
            raise UnknownSensorConfig(f"sensor {cfg.id} observes states outside the slot layout")
        ys = np.asarray(ys, dtype=float)
        full = np.zeros(ys.shape[:-1] + (self.stats.state_dim,))
        full[..., list(obs)] = ys
        z = encode_states(full, self.stats)
        meas, mask = [], []
        for j in self.slots:
            seen = j in obs
            block = z[..., self._cols[j]] if seen else np.zeros(z.shape[:-1] + (len(self._cols[j]),))
            meas.append(block)
            mask.append(np.full(z.shape[:-1] + (1,), 1.0 if seen else 0.0))
        u = encode_controls(controls, self.stats)
        return np.concatenate(meas + mask + [u], axis=-1)

    def to_dict(self) -> dict:
        return {"slots": list(self.slots)}


def _causal_outputs(model: SeqModel, feats: np.ndarray) -> np.ndarray:
    """Per-step outputs where step ``k`` only sees inputs ``0..k``.

    With patches of 2 the output at the last position of a patch depends on
    nothing later, so two aligned passes (original and shifted by one zero
    row) reproduce prefix-by-prefix evaluation.
    """
    p = model.config.patch_size
    B, L, _ = feats.shape
    out = np.empty((B, L, model.config.output_dim))
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for shift in range(p):
            # positions k with (k + 1 + shift) % p == 0 end a patch in this pass
            ks = [k for k in range(L) if (k + 1 + shift) % p == 0]
            if not ks:
                continue
            n = ks[-1] + 1 + shift
            seq = np.concatenate([np.zeros((B, shift, feats.shape[-1])), feats[:, :n - shift]], axis=1)
            res = model(torch.as_tensor(seq, dtype=dtype)).cpu().numpy()
            out[:, ks] = res[:, [k + shift for k in ks]]
    return out


class E2EEstimator:
    def __init__(self, model: SeqModel, encoding: E2EEncoding | None = None):
        self.model = model
        self.encoding = encoding or E2EEncoding(model.stats)

    def estimate(self, ys, controls, cfg: SensorConfig) -> np.ndarray:
        ys = np.asarray(ys, dtype=float)
        single = ys.ndim == 2
        feats = self.encoding.encode(ys, controls, cfg)
        if single:
            feats = feats[None]
        L = feats.shape[1]
        M = self.model.config.max_sequence_length
        if L > M:
            raise FMUKFError(f"End2End context is limited to {M} steps, got {L}")
        out = decode_states(_causal_outputs(self.model, feats), self.encoding.stats)
        return out[0] if single else out


def e2e_estimate(model: SeqModel, ys, controls, cfg: SensorConfig) -> np.ndarray:
    slots = getattr(model, "meta", {}).get("encoding", {}).get("slots", sensors.H1_INDICES)
    return E2EEstimator(model, E2EEncoding(model.stats, slots)).estimate(ys, controls, cfg)


def e2e_model(stats: NormStats, model_cfg: SeqModelConfig | None = None,
              slots=sensors.H1_INDICES, **kw) -> SeqModel:
    enc = E2EEncoding(stats, slots)
    if model_cfg is None:
        model_cfg = SeqModelConfig.desk(enc.input_dim, enc.output_dim, **kw)
    if model_cfg.input_dim != enc.input_dim or model_cfg.output_dim != enc.output_dim:
        raise ConfigError("model dims do not match the End2End encoding")
    m = SeqModel(model_cfg, stats)
    m.meta = {"kind": "end2end", "encoding": enc.to_dict()}
    return m


def train_e2e_on_arrays(states: Sequence[np.ndarray], controls: Sequence[np.ndarray],
                        sensor_cfgs: Sequence[SensorConfig], model_cfg: SeqModelConfig | None,
                        train_cfg: TrainConfig, val_states=None, val_controls=None,
                        stats: NormStats | None = None, slots=sensors.H1_INDICES,
                        angle_idx=None) -> TrainResult:
    """Train End2End on windows with freshly drawn measurement noise per sample.

    Each sample picks one of ``sensor_cfgs`` uniformly, so a single network
    learns every sensor layout.
    """
    states = [np.asarray(s, dtype=float) for s in states]
    controls = [np.asarray(u, dtype=float) for u in controls]
    if stats is None:
        kw = {} if angle_idx is None else {"angle_idx": angle_idx}
        stats = fit_norm_stats(np.concatenate(states), np.concatenate(controls), **kw)
    torch.manual_seed(train_cfg.seed)
    model = e2e_model(stats, model_cfg, slots)
    enc = E2EEncoding(stats, slots)
    L = model.config.max_sequence_length
    cfgs = list(sensor_cfgs)

    def batch(sts, cts, rng, pick):
        xs, ts = [], []
        for s, u, ci in zip(sts, cts, pick):
            if len(s) < L:
                raise FMUKFError(f"trajectory of {len(s)} steps, need {L}")
            a = int(rng.integers(len(s) - L + 1))
            cfg = cfgs[ci]
            clean = sensors.h(s[a:a + L], cfg)
            y = clean + rng.standard_normal(clean.shape) * np.asarray(cfg.noise_std)
            xs.append(enc.encode(y, u[a:a + L], cfg))
            ts.append(encode_states(s[a:a + L], stats))
        return np.stack(xs), np.stack(ts)

    def sample(idx, rng):
        pick = rng.integers(len(cfgs), size=len(idx))
        return batch([states[i] for i in idx], [controls[i] for i in idx], rng, pick)

    val = None
    if val_states:
        vrng = np.random.default_rng([train_cfg.seed, 8])
        pick = np.arange(len(val_states)) % len(cfgs)
        vx, vy = batch(list(val_states), list(val_controls), vrng, pick)
        val = lambda: (vx, vy)  # noqa: E731
    res = fit(model, sample, len(states), train_cfg, val)
    res.model.meta = {"kind": "end2end", "encoding": enc.to_dict()}
    return res


def train_e2e(manifest, model_cfg: SeqModelConfig | None, train_cfg: TrainConfig,
              sensor_cfgs: Sequence[SensorConfig] | None = None, out_dir=None) -> TrainResult:
    """End2End counterpart of :func:`fmukf.seqmodel.train.train` (h1 and h2 mixed)."""
    manifest.check_split()
    cfgs = list(sensor_cfgs or [sensors.make_sensor("H1"), sensors.make_sensor("H2")])
    tr_ids, val_ids = _split_ids(manifest.train_ids, train_cfg.val_fraction, train_cfg.seed)
    tr_ids, val_ids = [int(i) for i in tr_ids], [int(i) for i in val_ids]
    tr = [manifest.load(r) for r in manifest.records_for(tr_ids)]
    va = [manifest.load(r) for r in manifest.records_for(val_ids)]
    stats = fit_norm_stats(np.concatenate([t.states for t in tr]),
                           np.concatenate([t.controls for t in tr]))
    res = train_e2e_on_arrays([t.states for t in tr], [t.controls for t in tr], cfgs, model_cfg,
                              train_cfg, [t.states for t in va] or None,
                              [t.controls for t in va] or None, stats=stats)
    if out_dir is not None:
        from dataclasses import asdict
        import json

        extra = dict(res.model.meta)
        extra.update({"train": asdict(train_cfg), "train_ids": tr_ids, "val_ids": val_ids,
                      "sensors": [c.to_dict() for c in cfgs], "dt": manifest.dt})
        save_model(res.model, out_dir, extra)
        Path(out_dir, "history.json").write_text(json.dumps(res.history, indent=1))
    return res


# ------------------------------------------------------------ specs and runs

@dataclass
class EstimatorSpec:
    kind: str
    name: str = ""
    model: str | None = None
    q_scale: float | None = None
    Q: list | None = None
    sensor: str | None = None

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.kind in ("FM_UKF", "FM_UKF_INTEGRATOR", "END2END") and not self.model:
            raise ConfigError(f"{self.kind} needs a model artifact")
        self.name = self.name or self.kind

    @property
    def is_ukf(self) -> bool:
        return self.kind != "END2END"

    def process_noise(self, default_scale: float = DEFAULT_Q_SCALE) -> np.ndarray:
        if self.Q is not None:
            q = np.asarray(self.Q, dtype=float)
            return np.diag(q) if q.ndim == 1 else q.reshape(ship.STATE_DIM, ship.STATE_DIM)
        return default_q(self.q_scale if self.q_scale is not None else default_scale)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


class ModelCache:
    """Loads each artifact once; models are read-only in eval mode."""

    def __init__(self, root=None):
        self.root = Path(root) if root else None
        self._models = {}

    def get(self, path) -> SeqModel:
        p = Path(path)
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        key = str(p.resolve())
        if key not in self._models:
            m = load_model(p)
            m.double()
            self._models[key] = m
        return self._models[key]


def run_estimator(spec: EstimatorSpec, trajectory, cfg: SensorConfig, seed: int, *,
                  params: ship.ShipParams | None = None, base: ship.ShipParams | None = None,
                  q_scale: float = DEFAULT_Q_SCALE, models: ModelCache | None = None,
                  length: int | None = None, ys=None, return_covs: bool = False):
    """Estimate the state sequence of one trajectory.

    Measurements come from ``sensors.measure_sequence(states, cfg, seed)``
    unless ``ys`` is given, so every estimator sharing a seed sees the
    same realization.  ``return_covs`` applies to the UKF kinds only and
    adds the posterior covariances as a second return value.
    """
    states = np.asarray(trajectory.states, dtype=float)
    controls = np.asarray(trajectory.controls, dtype=float)
    if length is not None:
        states, controls = states[:length], controls[:length]
    if len(states) < 2:
        raise FMUKFError("trajectory too short to estimate")
    if ys is None:
        ys = sensors.measure_sequence(states, cfg, seed)
    dt = float(trajectory.dt)
    base = base or ship.base_params()
    models = models or ModelCache()
    if spec.kind == "END2END":
        if return_covs:
            raise ConfigError("END2END produces no covariances")
        return e2e_estimate(models.get(spec.model), ys, controls, cfg)
    if spec.kind == "ORACLE_UKF":
        if params is None:
            raise ConfigError("ORACLE_UKF needs the true instance parameters")
        model = oracle_process_model(params, dt)
    elif spec.kind == "BASE_UKF":
        model = base_process_model(base, dt)
    elif spec.kind == "CV_UKF":
        model = cv_process_model(base, dt)
    else:
        model = fm_process_model(models.get(spec.model), spec.kind == "FM_UKF_INTEGRATOR", dt)
    return run_ukf(model, spec.process_noise(q_scale), ys, controls, cfg, base,
                   return_covs=return_covs)


def tune_q_scale(trajectories, params_of, cfgs: Sequence[SensorConfig],
                 grid=(0.01, 0.1, 1.0, 10.0, 100.0), seed: int = 0,
                 base: ship.ShipParams | None = None, length: int | None = None,
                 score=None) -> tuple[float, dict]:
    """Coarse grid search of the shared Q scale on the three classical baselines.

    Minimizes the mean over (baseline, sensor, trajectory, feature) of the
    MAE divided by the feature's mean MAE across the grid, so features of
    different units weigh alike.  Returns ``(best_scale, table)``.
    """
    from .bench import mae_vector

    kinds = ("ORACLE_UKF", "BASE_UKF", "CV_UKF")
    raw = {}
    for s in grid:
        rows = []
        for kind in kinds:
            for cfg in cfgs:
                for i, tr in enumerate(trajectories):
                    try:
                        est = run_estimator(EstimatorSpec(kind), tr, cfg, seed + i,
                                            params=params_of(tr), base=base, q_scale=s,
                                            length=length)
                        truth = np.asarray(tr.states, dtype=float)[:len(est)]
                        rows.append(mae_vector(est, truth))
                    except FMUKFError:
                        rows.append(np.full(ship.STATE_DIM, np.nan))
        raw[s] = np.array(rows)
    ref = np.nanmean(np.stack(list(raw.values())), axis=(0, 1))
    table = {s: float(np.nanmean(v / ref)) if np.isfinite(v).any() else float("inf")
             for s, v in raw.items()}
    best = min(table, key=table.get)
    return best, table
