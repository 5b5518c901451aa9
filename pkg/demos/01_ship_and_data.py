"""Tour of the ship model and the benchmark data pipeline.

Simulates the nominal container ship under pink-noise commands, samples a
handful of perturbed instances, measures how different their dynamics are
and writes a small dataset to ``demo_out/data``.

Run with ``python3 demos/01_ship_and_data.py``.
"""

from pathlib import Path

import numpy as np

from fmukf import dataset, ship
from fmukf.instances import DsimConfig, build_pool, dsim, sample_candidate

out = Path("demo_out")
out.mkdir(exist_ok=True)

# -- the nominal ship at service speed
base = ship.base_params()
x = ship.service_state(base, speed=7.3, shaft=70 / 60)
print("service state:", {n: round(float(v), 4) for n, v in zip(ship.STATE_NAMES, x)})

# a 20 degree rudder step held for five minutes turns the ship
cmd = np.tile([np.deg2rad(20.0), 70 / 60], (300, 1))
turn = ship.simulate(base, x, cmd)
print(f"after 300 s: heading {np.rad2deg(turn[-1, ship.PSI]):.1f} deg, "
      f"surge {turn[-1, ship.U]:.2f} m/s (from {x[ship.U]:.2f}), "
      f"peak roll {np.rad2deg(np.abs(turn[:, ship.PHI]).max()):.1f} deg")

# -- one benchmark trajectory: pink-noise rudder and shaft commands
traj = dataset.generate_trajectory(base, 384, traj_seed=0)
print(f"\npink-noise trajectory: {len(traj)} steps of {traj.dt:.0f} s")
for j, name in enumerate(ship.STATE_NAMES):
    col = traj.states[:, j]
    print(f"  {name:>5}: min {col.min():10.4f}  max {col.max():10.4f}")

# -- perturbed instances and their dissimilarity to the nominal ship
cfg = DsimConfig(n_samples=256, n_rollouts=4, rollout_length=200)
print("\ndissimilarity of random +-30% instances to the nominal ship:")
for seed in range(4):
    cand = sample_candidate(base, seed)
    print(f"  seed {seed}: dsim = {dsim(base, cand, base, cfg):.3f}")

# -- a small pool: draw 12 stable candidates, keep the 6 most distinct
pool = build_pool(base, 6, seed=0, dsim_cfg=cfg, probe_count=2, probe_length=200)
print(f"\npool ids {[p.instance_id for p in pool.instances]}, "
      f"dropped {[p.instance_id for p in pool.discarded]}")
manifest = dataset.build_dataset(pool, 4, 256, seed=0, out_dir=out / "data", train_fraction=0.5)
print(f"dataset: {len(manifest.records)} trajectories, train ships {manifest.train_ids}, "
      f"test ships {manifest.test_ids} -> {out / 'data'}")
