"""Evaluation harness: MAE distributions, medians, mean ranks and report files.

An experiment runs every estimator on every (test trajectory, sensor) pair
under common random numbers: the measurement seed depends only on the
experiment seed, the trajectory and the sensor.  Per-pair results are cached
on disk keyed by the config hash so interrupted runs resume.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import ship
from .dataset import DatasetManifest
from .errors import ConfigError, FMUKFError, LengthMismatch
from .estimators import EstimatorSpec, ModelCache, run_estimator
from .instances import InstancePool
from .sensors import SensorConfig, sensor_from_dict, wrap_angle

log = logging.getLogger(__name__)

FEATURES = ship.STATE_NAMES
QUANTILES = (0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)


# ------------------------------------------------------------ metrics

def _abs_error(est, truth, j):
    d = np.asarray(est, dtype=float)[..., j] - np.asarray(truth, dtype=float)[..., j]
    return np.abs(wrap_angle(d)) if j in ship.ANGLE_IDX else np.abs(d)


def mae(estimates, truth, j: int, skip: int = 0) -> float:
    """Mean absolute error of feature ``j`` over steps ``skip..``; angles on the circle."""
    est = np.asarray(estimates)
    tru = np.asarray(truth)
    if est.shape != tru.shape:
        raise LengthMismatch(f"estimates {est.shape} vs truth {tru.shape}")
    return float(np.mean(_abs_error(est[skip:], tru[skip:], j)))


def mae_vector(estimates, truth, skip: int = 0) -> np.ndarray:
    """MAE of every state feature, shape (10,)."""
    est = np.asarray(estimates)
    return np.array([mae(est, truth, j, skip) for j in range(est.shape[-1])])


def rank_table(medians: Mapping[str, Mapping[str, float]]) -> dict:
    """Mean rank per estimator from ``{estimator: {feature: median}}``.

    Per feature the lowest median gets rank 1; ties share the average rank.
    """
    names = list(medians)
    if not names:
        return {}
    feats = list(medians[names[0]])
    if any(set(medians[n]) != set(feats) for n in names):
        raise ValueError("all estimators need the same feature set")
    ranks = np.array([rankdata([medians[n][f] for n in names], method="average") for f in feats])
    return {n: float(ranks[:, i].mean()) for i, n in enumerate(names)}


# ------------------------------------------------------------ config

def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    manifest: str
    estimators: list
    sensors: list = field(default_factory=lambda: [{"id": "H1"}, {"id": "H2"}])
    n_trajectories: int = 5000
    length: int = 192
    seed: int = 0
    out: str = "results"
    q_scale: float = 1.0
    skip_warmup: int = 0
    failure_threshold: float = 0.05
    root: Path | None = None

    def __post_init__(self):
        self.estimators = [e if isinstance(e, EstimatorSpec) else EstimatorSpec(**e)
                           for e in self.estimators]
        if not self.estimators:
            raise ConfigError("no estimators configured")
        if self.n_trajectories < 1 or self.length < 2:
            raise ConfigError("need at least one trajectory of two steps")
        names = [e.name for e in self.estimators]
        if len(set(names)) != len(names):
            raise ConfigError("estimator names must be unique")

    @classmethod
    def from_dict(cls, d: Mapping, root=None) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "root"}
        missing = {"manifest", "estimators"} - set(known)
        if missing:
            raise ConfigError(f"config misses {sorted(missing)}")
        try:
            return cls(**known, root=Path(root) if root else None)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        return cls.from_dict(d, root=p.parent)

    def resolve(self, rel) -> Path:
        q = Path(rel)
        return q if q.is_absolute() or self.root is None else self.root / q

    def to_dict(self) -> dict:
        return {"manifest": str(self.manifest), "estimators": [e.to_dict() for e in self.estimators],
                "sensors": list(self.sensors), "n_trajectories": self.n_trajectories,
                "length": self.length, "seed": self.seed, "out": str(self.out),
                "q_scale": self.q_scale, "skip_warmup": self.skip_warmup,
                "failure_threshold": self.failure_threshold}

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("failure_threshold")
        return _hash(d)

    def sensor_configs(self) -> list:
        return [sensor_from_dict(s) for s in self.sensors]


# ------------------------------------------------------------ report

@dataclass
class EvalReport:
    samples: dict          # estimator -> sensor -> feature -> list of MAE (trajectory order)
    failures: dict         # estimator -> sensor -> count
    trajectories: list     # trajectory keys in evaluation order
    metadata: dict = field(default_factory=dict)

    def medians(self, sensor: str) -> dict:
        return {e: {f: float(np.median(v)) if len(v) else float("nan")
                    for f, v in self.samples[e][sensor].items()}
                for e in self.samples}

    def quartiles(self, est: str, sensor: str, feature: str) -> tuple:
        v = self.samples[est][sensor][feature]
        return tuple(float(q) for q in np.quantile(v, [0.25, 0.5, 0.75])) if len(v) else (np.nan,) * 3

    def ranks(self, sensor: str) -> dict:
        return rank_table(self.medians(sensor))

    @property
    def sensors(self) -> list:
        first = next(iter(self.samples.values()))
        return list(first)

    def failure_fraction(self) -> float:
        total = len(self.trajectories) * len(self.samples) * len(self.sensors)
        return sum(sum(v.values()) for v in self.failures.values()) / max(total, 1)

    def to_dict(self) -> dict:
        summary = {}
        for s in self.sensors:
            med = self.medians(s)
            summary[s] = {"medians": med, "mean_rank": self.ranks(s),
                          "quartiles": {e: {f: self.quartiles(e, s, f) for f in med[e]}
                                        for e in med}}
        return {"metadata": self.metadata, "trajectories": self.trajectories,
                "failures": self.failures, "summary": summary, "samples": self.samples}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "sensor", "feature", "median", "q25", "q75", "n", "failures",
                    "mean_rank"])
        for s in self.sensors:
            ranks = self.ranks(s)
            for e in self.samples:
                for f, v in self.samples[e][s].items():
                    q25, q50, q75 = self.quartiles(e, s, f)
                    w.writerow([e, s, f, repr(q50), repr(q25), repr(q75), len(v),
                                self.failures[e][s], repr(ranks[e])])
        return buf.getvalue()

    def quantile_table(self, qs: Sequence[float] = QUANTILES) -> str:
        """Violin-ready quantiles of every MAE distribution as CSV."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "sensor", "feature"] + [f"q{q:g}" for q in qs])
        for e in self.samples:
            for s in self.samples[e]:
                for f, v in self.samples[e][s].items():
                    vals = np.quantile(v, qs) if len(v) else np.full(len(qs), np.nan)
                    w.writerow([e, s, f] + [repr(float(x)) for x in vals])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "report.json", json.dumps(self.to_dict(), indent=1, sort_keys=True))
        _atomic_write(out / "report.csv", self.to_csv())
        return out

    @classmethod
    def load(cls, path) -> "EvalReport":
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        d = json.loads(p.read_text())
        return cls(d["samples"], d["failures"], d["trajectories"], d.get("metadata", {}))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


# ------------------------------------------------------------ evaluation

def select_test_trajectories(manifest: DatasetManifest, n: int) -> list:
    """Round-robin over test instances (sorted ids) until ``n`` records are picked."""
    by_inst = {}
    for r in sorted(manifest.records_for(manifest.test_ids), key=lambda r: (r.instance_id, r.seed)):
        by_inst.setdefault(r.instance_id, []).append(r)
    picked, depth = [], 0
    while len(picked) < n:
        layer = [recs[depth] for _, recs in sorted(by_inst.items()) if depth < len(recs)]
        if not layer:
            break
        picked.extend(layer[:n - len(picked)])
        depth += 1
    return picked


def measurement_seed(seed: int, traj_index: int, sensor_index: int) -> int:
    ss = np.random.SeedSequence([seed, traj_index, sensor_index, 17])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & np.uint64(2 ** 63 - 1))


def evaluate(config: ExperimentConfig, threads: int = 1, use_cache: bool = True) -> EvalReport:
    """Run every estimator on every selected test trajectory and sensor."""
    manifest = DatasetManifest.load_file(config.resolve(config.manifest))
    manifest.check_split()
    if manifest.pool is None:
        raise ConfigError("manifest has no instance pool; the oracle baseline needs it")
    pool = InstancePool.load(manifest.resolve(manifest.pool))
    test = set(manifest.test_ids)
    records = select_test_trajectories(manifest, config.n_trajectories)
    if not records:
        raise ConfigError("no test trajectories in the manifest")
    if any(r.instance_id not in test or r.instance_id in set(manifest.train_ids) for r in records):
        raise ConfigError("selected trajectories leak training instances")
    for e in config.estimators:
        if e.model and not config.resolve(e.model).exists():
            raise ConfigError(f"model artifact {e.model} not found")
    sensors_ = config.sensor_configs()
    models = ModelCache(config.root)
    out = config.resolve(config.out)
    cache = out / "cache" / config.hash
    if use_cache:
        cache.mkdir(parents=True, exist_ok=True)
    chash = config.hash

    def job(i_rec):
        i, rec = i_rec
        traj = manifest.load(rec)
        params = pool.by_id(rec.instance_id)
        key = f"{rec.instance_id}_{rec.seed}"
        res = {}
        for si, cfg in enumerate(sensors_):
            mseed = measurement_seed(config.seed, i, si)
            for spec in config.estimators:
                path = cache / f"{key}_{spec.name}_{cfg.id}.json"
                if use_cache and path.exists():
                    res[(spec.name, cfg.id)] = json.loads(path.read_text())["mae"]
                    continue
                try:
                    est = run_estimator(spec, traj, cfg, mseed, params=params, base=pool.base,
                                        q_scale=config.q_scale, models=models,
                                        length=config.length)
                    truth = np.asarray(traj.states, dtype=float)[:config.length]
                    vals = mae_vector(est, truth, config.skip_warmup)
                    value = vals.tolist() if np.all(np.isfinite(vals)) else None
                except (FMUKFError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    log.warning("%s on %s/%s failed: %s", spec.name, key, cfg.id, exc)
                    value = None
                res[(spec.name, cfg.id)] = value
                if use_cache:
                    _atomic_write(path, json.dumps({"config": chash, "mae": value}))
        return key, res

    items = list(enumerate(records))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(job, items))
    else:
        results = [job(it) for it in items]

    names = [e.name for e in config.estimators]
    sids = [c.id for c in sensors_]
    samples = {e: {s: {f: [] for f in FEATURES} for s in sids} for e in names}
    failures = {e: {s: 0 for s in sids} for e in names}
    for key, res in results:   # already in trajectory order
        for (e, s), value in res.items():
            if value is None:
                failures[e][s] += 1
                continue
            for f, v in zip(FEATURES, value):
                samples[e][s][f].append(v)
    n_fail = sum(sum(v.values()) for v in failures.values())
    if n_fail:
        log.warning("%d estimator runs failed and are excluded from the aggregates", n_fail)
    meta = {"config_hash": chash, "config": config.to_dict(), "seed": config.seed,
            "n_trajectories": len(records), "angles": "rad"}
    return EvalReport(samples, failures, [k for k, _ in results], meta)
