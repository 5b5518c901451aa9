"""Population of ship instances: perturbation, stability rejection and
dissimilarity filtering."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import ship
from .dataset import command_noise_config, pink_noise, probe_commands, sample_initial_state
from .errors import DegenerateNormalizer, PoolExhausted

log = logging.getLogger(__name__)

VARIATION_RANGE = (0.7, 1.3)
_NORMALIZER_FLOOR = 1e-20


def sample_candidate(base: ship.ShipParams, rng_seed, instance_id: int = 0,
                     low: float = VARIATION_RANGE[0],
                     high: float = VARIATION_RANGE[1]) -> ship.ShipParams:
    """Scale each designated variation parameter by an independent U[low, high] factor."""
    base.validate()
    rng = np.random.default_rng(rng_seed)
    factors = rng.uniform(low, high, size=len(base.variation_params))
    updates = {k: base[k] * f for k, f in zip(base.variation_params, factors)}
    return base.with_values(instance_id=instance_id, **updates)


# ----------------------------------------------------------------------- dsim

@dataclass(frozen=True)
class DsimConfig:
    """Monte-Carlo settings for the dissimilarity expectation.

    Operating states are taken from ``n_rollouts`` base-model rollouts of
    ``rollout_length`` steps under pink-noise commands; each draw picks a
    (state, command) pair from them.
    """

    n_samples: int = 512
    n_rollouts: int = 8
    rollout_length: int = 384
    dt: float = ship.DEFAULT_DT
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError("n_samples must be >= 100")


_draw_cache: dict = {}


def operating_draws(base: ship.ShipParams, cfg: DsimConfig):
    """Common (state, control) draws shared by every dsim evaluation; cached."""
    key = (tuple(sorted(base.values.items())), cfg)
    hit = _draw_cache.get(key)
    if hit is not None:
        return hit
    ss = np.random.SeedSequence([cfg.seed, 4242])
    roll_seeds, pick_seed = ss.spawn(2)
    states, controls = [], []
    for s in roll_seeds.generate_state(cfg.n_rollouts):
        rng = np.random.default_rng(int(s))
        init = sample_initial_state(base, rng)
        cmd = pink_noise(command_noise_config(base, cfg.rollout_length, int(rng.integers(2 ** 63))))
        traj = ship.simulate(base, init, cmd[:-1], cfg.dt)
        states.append(traj)
        controls.append(cmd)
    states = np.concatenate(states)
    controls = np.concatenate(controls)
    rng = np.random.default_rng(pick_seed)
    idx = rng.integers(len(states), size=cfg.n_samples)
    draws = (states[idx], controls[idx])
    if len(_draw_cache) > 16:
        _draw_cache.clear()
    _draw_cache[key] = draws
    return draws


def dsim_normalizer(base: ship.ShipParams, cfg: DsimConfig) -> np.ndarray:
    """Per-dimension mean squared one-step state change of the base model."""
    xs, us = operating_draws(base, cfg)
    norm = np.mean((ship.step(xs, us, base, cfg.dt) - xs) ** 2, axis=0)
    bad = np.flatnonzero(norm < _NORMALIZER_FLOOR)
    if bad.size:
        names = [ship.STATE_NAMES[i] for i in bad]
        raise DegenerateNormalizer(f"base model never moves state dims {names}")
    return norm


def one_step_predictions(params: ship.ShipParams, base: ship.ShipParams,
                         cfg: DsimConfig) -> np.ndarray:
    xs, us = operating_draws(base, cfg)
    return ship.step(xs, us, params, cfg.dt)


def dsim_terms(theta_i, theta_j, base, cfg: DsimConfig) -> np.ndarray:
    """Per-draw summands whose mean is dsim^2."""
    norm = dsim_normalizer(base, cfg)
    fi = one_step_predictions(theta_i, base, cfg)
    fj = one_step_predictions(theta_j, base, cfg)
    return np.sum((fi - fj) ** 2 / norm, axis=-1)


def dsim(theta_i, theta_j, base, cfg: DsimConfig | None = None) -> float:
    """Monte-Carlo dissimilarity between two parameterizations (square root of dsim^2)."""
    cfg = cfg or DsimConfig()
    return float(np.sqrt(np.mean(dsim_terms(theta_i, theta_j, base, cfg))))


def dsim_matrix(thetas, base, cfg: DsimConfig | None = None) -> np.ndarray:
    """All pairwise dissimilarities, sharing one set of draws."""
    cfg = cfg or DsimConfig()
    norm = dsim_normalizer(base, cfg)
    scale = 1.0 / np.sqrt(norm * cfg.n_samples)
    feats = np.stack([(one_step_predictions(t, base, cfg) * scale).ravel() for t in thetas])
    return squareform(pdist(feats))


def nearest_neighbor_scores(dmat: np.ndarray) -> np.ndarray:
    d = np.array(dmat, dtype=float, copy=True)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


# ----------------------------------------------------------------------- pool

@dataclass
class InstancePool:
    instances: list
    base: ship.ShipParams
    seed: int
    dsim_matrix: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    # stable candidates removed by the dissimilarity filter, kept for auditing
    discarded: list = field(default_factory=list)
    nn_scores: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def by_id(self, instance_id: int) -> ship.ShipParams:
        for p in self.instances:
            if p.instance_id == instance_id:
                return p
        raise KeyError(instance_id)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "base": self.base.to_dict(),
            "instances": [p.to_dict() for p in self.instances],
            "discarded": [p.to_dict() for p in self.discarded],
            "nn_scores": {str(k): v for k, v in self.nn_scores.items()},
        }

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "InstancePool":
        d = json.loads(Path(path).read_text())
        return cls(instances=[ship.ShipParams.from_dict(p) for p in d["instances"]],
                   base=ship.ShipParams.from_dict(d["base"]), seed=d["seed"],
                   config=d.get("config", {}),
                   discarded=[ship.ShipParams.from_dict(p) for p in d.get("discarded", [])],
                   nn_scores={int(k): v for k, v in d.get("nn_scores", {}).items()})


def build_pool(base: ship.ShipParams, target_count: int = 1000, seed: int = 0, *,
               candidates: list | None = None, dsim_cfg: DsimConfig | None = None,
               retained_fraction: float = 0.5, candidate_budget: int | None = None,
               probe_count: int = 8, probe_length: int = 384,
               dt: float = ship.DEFAULT_DT) -> InstancePool:
    """Sample, screen and filter ship instances.

    Candidates are drawn until ``target_count / retained_fraction`` stable
    ones exist (or ``candidates`` are used as given).  The full dissimilarity
    matrix over the stable set is computed once and the candidates with the
    lowest nearest-neighbor dissimilarity are dropped in a single pass until
    ``target_count`` remain.
    """
    if target_count < 2:
        raise ValueError("target_count must be >= 2")
    dsim_cfg = dsim_cfg or DsimConfig(seed=seed, dt=dt)
    probes = probe_commands(base, probe_count, probe_length, seed)
    stable = []
    if candidates is not None:
        for i, c in enumerate(candidates):
            if ship.is_stable(c, probes, dt):
                stable.append(c)
            else:
                log.info("hand-picked candidate %d rejected as unstable", i)
    else:
        needed = int(np.ceil(target_count / retained_fraction))
        budget = candidate_budget or 20 * needed
        ss = np.random.SeedSequence([seed, 1701])
        i = 0
        while len(stable) < needed:
            if i >= budget:
                raise PoolExhausted(
                    f"only {len(stable)} stable candidates after {budget} draws (needed {needed})")
            cand = sample_candidate(base, ss.spawn(1)[0], instance_id=i)
            if ship.is_stable(cand, probes, dt):
                stable.append(cand)
            i += 1
        log.info("pool: %d stable of %d candidates", len(stable), i)

    if len(stable) < target_count:
        if candidates is None:
            raise PoolExhausted("not enough stable candidates")
        kept, dropped, dmat, scores = stable, [], None, {}
    else:
        dmat = dsim_matrix(stable, base, dsim_cfg)
        nn = nearest_neighbor_scores(dmat)
        # stable sort on -score keeps draw order among ties
        order = np.argsort(-nn, kind="stable")
        keep = np.sort(order[:target_count])
        drop = np.sort(order[target_count:])
        kept = [stable[i] for i in keep]
        dropped = [stable[i] for i in drop]
        scores = {stable[i].instance_id: float(nn[i]) for i in range(len(stable))}
    kept = sorted(kept, key=lambda p: p.instance_id)
    cfg = {"target_count": target_count, "retained_fraction": retained_fraction,
           "dsim": asdict(dsim_cfg), "probe_count": probe_count,
           "probe_length": probe_length, "dt": dt}
    return InstancePool(kept, base, seed, dmat, cfg, dropped, scores)
