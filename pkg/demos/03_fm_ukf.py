"""Train a small dynamics model and use it inside the UKF.

Reads the dataset written by ``01_ship_and_data.py``, trains the patched
causal transformer for a few epochs and then filters a test trajectory with
FM-UKF, with and without the kinematic integrator for the pose.  A few
epochs on a few ships only show the mechanics; the desk-scale numbers in the
README come from 50 ships and 50 epochs.

Run with ``python3 demos/03_fm_ukf.py [epochs]``.
"""

import sys
from pathlib import Path

import numpy as np

from fmukf import dataset, sensors, ship
from fmukf import estimators as E
from fmukf.bench import mae_vector
from fmukf.instances import InstancePool
from fmukf.seqmodel import SeqModelConfig
from fmukf.seqmodel.train import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
out = Path("demo_out")
manifest = dataset.DatasetManifest.load_file(out / "data" / "manifest.json")
pool = InstancePool.load(manifest.resolve(manifest.pool))

res = train(manifest, SeqModelConfig.desk(),
            TrainConfig.desk(epochs=epochs, batch_schedule={0: 8}, micro_batch=8,
                             windows_per_trajectory=4),
            out_dir=out / "fm_model")
for h in res.history:
    print(f"epoch {h['epoch']:3d}  train {h['train_loss']:9.3f}  val {h['val_loss']:9.3f}")

rec = manifest.records_for(manifest.test_ids)[0]
traj = manifest.load(rec)
truth = pool.by_id(rec.instance_id)
cfg = sensors.make_sensor("H2")
models = E.ModelCache()
print(f"\nunseen ship {rec.instance_id}, sensor H2, 192 steps")
print("estimator          " + "".join(f"{n:>10}" for n in ship.STATE_NAMES[:8]))
for kind in ("FM_UKF", "FM_UKF_INTEGRATOR", "BASE_UKF", "ORACLE_UKF"):
    spec = E.EstimatorSpec(kind, model=str(out / "fm_model") if kind.startswith("FM") else None)
    est = E.run_estimator(spec, traj, cfg, seed=0, params=truth, base=pool.base, models=models,
                          length=192)
    err = mae_vector(est, np.asarray(traj.states)[:192])
    print(f"{kind:<19}" + "".join(f"{e:10.2e}" for e in err[:8]))
