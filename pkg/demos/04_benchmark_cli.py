"""Drive the whole benchmark through the command-line interface.

Each call below is equivalent to a shell invocation of ``fmukf``; the
experiment runs the classical baselines on the dataset of
``01_ship_and_data.py`` and prints the report.

Run with ``python3 demos/04_benchmark_cli.py``.
"""

import json
from pathlib import Path

from fmukf.cli import main

out = Path("demo_out")
exp = out / "experiment.json"
exp.write_text(json.dumps({
    "manifest": "data/manifest.json",
    "sensors": [{"id": "H1"}, {"id": "H2"}],
    "estimators": [{"kind": "ORACLE_UKF"}, {"kind": "BASE_UKF"}, {"kind": "CV_UKF"}],
    "n_trajectories": 8,
    "length": 192,
    "seed": 0,
    "out": "results",
}, indent=1))

# fmukf evaluate --config demo_out/experiment.json
code = main(["evaluate", "--config", str(exp)])
print("evaluate exit code", code)

# fmukf report --report demo_out/results
main(["report", "--report", str(out / "results")])

# a second evaluate is served from the per-run cache
main(["evaluate", "--config", str(exp)])

# fmukf report --quantiles writes the violin-ready table
main(["report", "--quantiles", "--report", str(out / "results"), "--out", str(out / "results")])
