"""Pink-noise excitation, trajectory rollout and the on-disk dataset.

Trajectory files are little-endian and language neutral::

    offset  type     field
    0       4s       magic b"FMUK"
    4       u16      format version
    6       u16      reserved (0)
    8       u32      L, number of time steps
    12      u32      reserved (0)
    16      f64      dt [s]
    24      u64      instance_id
    32      u64      seed
    40      f32[L,12] rows of [state(10), control(2)]
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ship
from .errors import Diverged, FMUKFError, SplitViolation

log = logging.getLogger(__name__)

MAGIC = b"FMUK"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHIIdQQ")
HEADER_SIZE = HEADER.size  # 40
ROW_WIDTH = ship.STATE_DIM + ship.CONTROL_DIM
SCHEMA_VERSION = 1

FULL_SCALE = {"instances": 1000, "trajectories_per_instance": 400, "length": 384}


# --------------------------------------------------------------------- noise

@dataclass(frozen=True)
class PinkNoiseConfig:
    """Multi-channel pink-noise generator settings.

    ``amplitude`` is the per-channel standard deviation after standardization,
    ``offset`` the channel mean and ``clamp`` the ``(low, high)`` limits.
    """

    length: int
    amplitude: tuple = (1.0,)
    offset: tuple = (0.0,)
    clamp: tuple = ((-np.inf, np.inf),)
    low_cut: float = 0.0
    dt: float = ship.DEFAULT_DT
    seed: int = 0

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("length must be >= 2")
        if any(a < 0 for a in self.amplitude):
            raise ValueError("amplitudes must be non-negative")
        if not (len(self.amplitude) == len(self.offset) == len(self.clamp)):
            raise ValueError("amplitude, offset and clamp need one entry per channel")


def pink_sequence(length: int, rng: np.random.Generator, low_cut: float = 0.0,
                  dt: float = 1.0) -> np.ndarray:
    """Zero-mean, unit-variance 1/f noise of ``length`` samples.

    White complex Gaussian spectrum scaled by ``1/sqrt(f)`` (flat below
    ``low_cut``), DC removed, inverse real FFT, standardized.
    """
    freqs = np.fft.rfftfreq(length, d=dt)
    spec = rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)
    f = freqs.copy()
    fmin = max(low_cut, freqs[1] if freqs.size > 1 else 1.0)
    f[f < fmin] = fmin
    spec /= np.sqrt(f)
    spec[0] = 0.0
    if length % 2 == 0:
        spec[-1] = spec[-1].real
    y = np.fft.irfft(spec, n=length)
    std = y.std()
    return y / std if std > 0 else y


def pink_noise(cfg: PinkNoiseConfig) -> np.ndarray:
    """Sample the configured channels; returns shape (length, channels)."""
    rng = np.random.default_rng(cfg.seed)
    cols = []
    for amp, off, (lo, hi) in zip(cfg.amplitude, cfg.offset, cfg.clamp):
        z = pink_sequence(cfg.length, rng, cfg.low_cut, cfg.dt)
        cols.append(np.clip(off + amp * z, lo, hi))
    return np.stack(cols, axis=-1)


def command_noise_config(params: ship.ShipParams, length: int, seed: int,
                         shaft_rpm: float = 70.0, shaft_std_rpm: float = 10.0,
                         shaft_band_rpm: tuple = (40.0, 100.0),
                         rudder_fraction: float = 0.8) -> PinkNoiseConfig:
    """Default excitation: rudder within +-0.8 delta_max, shaft speed around cruise."""
    dmax = params["delta_max"]
    lim = rudder_fraction * dmax
    return PinkNoiseConfig(
        length=length,
        amplitude=(lim / 2.0, shaft_std_rpm / 60.0),
        offset=(0.0, shaft_rpm / 60.0),
        clamp=((-lim, lim), (shaft_band_rpm[0] / 60.0, shaft_band_rpm[1] / 60.0)),
        seed=seed,
    )


def probe_commands(params: ship.ShipParams, count: int = 8, length: int = 384,
                   seed: int = 0) -> list:
    """Pink-noise command sequences used for stability screening."""
    ss = np.random.SeedSequence([seed, 7919])
    seeds = ss.generate_state(count)
    return [pink_noise(command_noise_config(params, length, int(s))) for s in seeds]


# --------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    instance_id: int
    seed: int
    dt: float
    states: np.ndarray   # (L, 10)
    controls: np.ndarray  # (L, 2)

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.controls = np.asarray(self.controls)

    def __len__(self):
        return len(self.states)

    def rows(self) -> np.ndarray:
        return np.concatenate([self.states, self.controls], axis=-1)

    def as_float32(self) -> "Trajectory":
        return Trajectory(self.instance_id, self.seed, self.dt,
                          self.states.astype(np.float32), self.controls.astype(np.float32))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.instance_id == other.instance_id and self.seed == other.seed
                and self.dt == other.dt
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.controls, other.controls))


def rollout(params: ship.ShipParams, init, controls, dt: float = ship.DEFAULT_DT,
            *, instance_id: int | None = None, seed: int = 0) -> Trajectory:
    """Simulate ``controls`` from ``init``; states[k+1] = step(states[k], controls[k])."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or len(controls) == 0:
        raise ValueError("controls must be a non-empty (L, 2) array")
    L = len(controls)
    states = np.empty((L, ship.STATE_DIM))
    states[0] = np.asarray(init, dtype=float)
    params.validate()
    with np.errstate(all="ignore"):
        for k in range(L - 1):
            try:
                states[k + 1] = ship.step(states[k], controls[k], params, dt, check=False)
            except Diverged as exc:
                raise Diverged(f"trajectory diverged at step {k + 1}") from exc
    iid = params.instance_id if instance_id is None else instance_id
    return Trajectory(iid, seed, dt, states, controls)


def sample_initial_state(params: ship.ShipParams, rng: np.random.Generator,
                         speed: float = 7.3, shaft_rpm: float = 70.0) -> np.ndarray:
    """Cruise at service speed with small velocity perturbations, origin pose."""
    x = np.zeros(ship.STATE_DIM)
    x[ship.U] = speed + 0.3 * rng.standard_normal()
    x[ship.V] = 0.05 * rng.standard_normal()
    x[ship.P] = 1e-3 * rng.standard_normal()
    x[ship.R] = 1e-3 * rng.standard_normal()
    x[ship.N] = shaft_rpm / 60.0
    return x


def trajectory_seed(seed: int, instance_id: int, index: int, attempt: int = 0) -> int:
    state = np.random.SeedSequence([seed, instance_id, index, attempt]).generate_state(
        1, dtype=np.uint64)
    return int(state[0]) & ((1 << 63) - 1)


def _trajectory_inputs(params, length, traj_seed):
    rng = np.random.default_rng(traj_seed)
    init = sample_initial_state(params, rng)
    cmd = pink_noise(command_noise_config(params, length, int(rng.integers(2 ** 63))))
    return init, cmd


def generate_trajectory(params: ship.ShipParams, length: int, traj_seed: int,
                        dt: float = ship.DEFAULT_DT) -> Trajectory:
    init, cmd = _trajectory_inputs(params, length, traj_seed)
    return rollout(params, init, cmd, dt, seed=traj_seed)


def generate_batch(params: ship.ShipParams, length: int, seeds: Sequence[int],
                   dt: float = ship.DEFAULT_DT) -> list:
    """Batched :func:`generate_trajectory`; diverged entries come back as None.

    Agrees with the one-at-a-time path to rounding (vectorized transcendental
    kernels may differ in the last bit); each path is itself deterministic.
    """
    inits, cmds = zip(*(_trajectory_inputs(params, length, s) for s in seeds))
    cmds = np.stack(cmds, axis=1)  # (L, B, 2)
    params.validate()
    states = np.empty((length, len(seeds), ship.STATE_DIM))
    states[0] = np.stack(inits)
    ok = np.ones(len(seeds), dtype=bool)
    dmax = params["delta_max"]
    with np.errstate(all="ignore"):
        for k in range(length - 1):
            x, u = states[k], cmds[k]
            k1 = ship.derivative(x, u, params, check=False)
            k2 = ship.derivative(x + 0.5 * dt * k1, u, params, check=False)
            k3 = ship.derivative(x + 0.5 * dt * k2, u, params, check=False)
            k4 = ship.derivative(x + dt * k3, u, params, check=False)
            nxt = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            nxt[..., ship.DELTA] = np.clip(nxt[..., ship.DELTA], -dmax, dmax)
            bad = ~np.all(np.isfinite(nxt), axis=-1)
            ok &= ~bad
            nxt[bad] = 0.0
            states[k + 1] = nxt
    return [Trajectory(params.instance_id, int(s), dt, states[:, i].copy(), cmds[:, i].copy())
            if ok[i] else None for i, s in enumerate(seeds)]


# ------------------------------------------------------------------ binary io

def write_trajectory(path: str | os.PathLike, traj: Trajectory) -> int:
    """Write one trajectory file; returns number of bytes written."""
    rows = np.ascontiguousarray(traj.rows(), dtype="<f4")
    header = HEADER.pack(MAGIC, FORMAT_VERSION, 0, rows.shape[0], 0, float(traj.dt),
                         int(traj.instance_id), int(traj.seed))
    data = header + rows.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def read_trajectory(path: str | os.PathLike) -> Trajectory:
    raw = Path(path).read_bytes()
    magic, version, _, L, _, dt, iid, seed = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FMUKFError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FMUKFError(f"{path}: unsupported version {version}")
    rows = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE, count=L * ROW_WIDTH)
    rows = rows.reshape(L, ROW_WIDTH).astype(np.float32)
    return Trajectory(int(iid), int(seed), float(dt),
                      rows[:, :ship.STATE_DIM].copy(), rows[:, ship.STATE_DIM:].copy())


def validate_trajectory(traj: Trajectory, params: ship.ShipParams | None = None,
                        rtol: float = 1e-4, atol: float = 1e-4) -> None:
    """Check the Trajectory invariants; raises :class:`FMUKFError` on violation.

    With ``params`` the one-step dynamics relation is re-checked at float32
    precision (files are stored as 32-bit floats).
    """
    if traj.states.shape != (len(traj.controls), ship.STATE_DIM):
        raise FMUKFError("states/controls length or width mismatch")
    if traj.controls.shape[-1] != ship.CONTROL_DIM:
        raise FMUKFError("control width mismatch")
    if not (np.all(np.isfinite(traj.states)) and np.all(np.isfinite(traj.controls))):
        raise FMUKFError("non-finite values in trajectory")
    if params is not None and len(traj) > 1:
        s = traj.states.astype(float)
        pred = ship.step(s[:-1], traj.controls[:-1].astype(float), params, traj.dt)
        if not np.allclose(pred, s[1:], rtol=rtol, atol=atol):
            raise FMUKFError("trajectory does not follow the ship dynamics")


# ------------------------------------------------------------------- manifest

@dataclass
class TrajectoryRecord:
    path: str
    instance_id: int
    seed: int
    length: int
    offset: int = HEADER_SIZE
    nbytes: int = 0


@dataclass
class DatasetManifest:
    dt: float
    train_ids: list
    test_ids: list
    records: list = field(default_factory=list)
    state_names: tuple = ship.STATE_NAMES
    control_names: tuple = ship.CONTROL_NAMES
    norm_stats: str | None = None
    pool: str | None = None
    seed: int = 0
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None

    def check_split(self) -> None:
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise SplitViolation(f"instances in both splits: {sorted(overlap)[:10]}")

    def records_for(self, ids: Iterable[int]) -> list:
        ids = set(ids)
        return [r for r in self.records if r.instance_id in ids]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, record: TrajectoryRecord) -> Trajectory:
        return read_trajectory(self.resolve(record.path))

    def load_split(self, split: str) -> list:
        ids = self.train_ids if split == "train" else self.test_ids
        return [self.load(r) for r in self.records_for(ids)]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dt": self.dt,
            "state_names": list(self.state_names),
            "control_names": list(self.control_names),
            "row_layout": list(self.state_names) + list(self.control_names),
            "split": {"train": sorted(self.train_ids), "test": sorted(self.test_ids)},
            "records": [r.__dict__ for r in self.records],
            "norm_stats": self.norm_stats,
            "pool": self.pool,
            "seed": self.seed,
        }

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1))
        os.replace(tmp, path)

    @classmethod
    def load_file(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        m = cls(dt=d["dt"], train_ids=list(d["split"]["train"]),
                test_ids=list(d["split"]["test"]),
                records=[TrajectoryRecord(**r) for r in d["records"]],
                state_names=tuple(d["state_names"]), control_names=tuple(d["control_names"]),
                norm_stats=d.get("norm_stats"), pool=d.get("pool"), seed=d.get("seed", 0),
                schema_version=d["schema_version"], root=path.parent)
        m.check_split()
        return m


def split_instances(ids: Sequence[int], seed: int, train_fraction: float = 0.9):
    ids = sorted(int(i) for i in ids)
    rng = np.random.default_rng([seed, 31337])
    perm = rng.permutation(ids)
    n_train = int(round(train_fraction * len(ids)))
    if len(ids) > 1:
        n_train = min(max(n_train, 1), len(ids) - 1)
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def build_dataset(pool, trajectories_per_instance: int, length: int, seed: int,
                  out_dir: str | os.PathLike, *, dt: float = ship.DEFAULT_DT,
                  train_fraction: float = 0.9, retry_budget: int = 5,
                  fit_stats: bool = True) -> DatasetManifest:
    """Roll out trajectories for every pool instance and write them with a manifest.

    Diverged rollouts are retried with fresh seeds up to ``retry_budget`` times.
    """
    instances = list(pool.instances)
    if not instances:
        raise ValueError("pool is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids, test_ids = split_instances([p.instance_id for p in instances], seed,
                                          train_fraction)
    records = []
    for params in sorted(instances, key=lambda p: p.instance_id):
        seeds = [trajectory_seed(seed, params.instance_id, k) for k in range(trajectories_per_instance)]
        batch = generate_batch(params, length, seeds, dt)
        for k, traj in enumerate(batch):
            attempt = 0
            while traj is None:
                log.warning("instance %d trajectory %d diverged (attempt %d)",
                            params.instance_id, k, attempt)
                attempt += 1
                if attempt > retry_budget:
                    raise Diverged(f"instance {params.instance_id}: retry budget exhausted")
                try:
                    traj = generate_trajectory(params, length,
                                               trajectory_seed(seed, params.instance_id, k, attempt), dt)
                except Diverged:
                    traj = None
            ts = traj.seed
            name = f"traj_{params.instance_id}_{ts}.bin"
            nbytes = write_trajectory(out / name, traj)
            records.append(TrajectoryRecord(name, params.instance_id, ts, length,
                                            HEADER_SIZE, nbytes))
    manifest = DatasetManifest(dt=dt, train_ids=train_ids, test_ids=test_ids,
                               records=records, seed=seed, root=out)
    if hasattr(pool, "save"):
        # the true parameters travel with the data for the oracle baseline
        pool.save(out / "pool.json")
        manifest.pool = "pool.json"
    if fit_stats:
        from .seqmodel.features import fit_norm_stats

        train = manifest.load_split("train")
        stats = fit_norm_stats(np.concatenate([t.states for t in train]),
                               np.concatenate([t.controls for t in train]))
        stats.save(out / "norm_stats.json")
        manifest.norm_stats = "norm_stats.json"
    manifest.save(out / "manifest.json")
    return manifest
