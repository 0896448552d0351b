"""Reduced particle-vs-mean-field sweep.

Runs 500 replicates at three population scales on a coarse mean-field grid
and prints how far the particle molar mass of C sits from the mean field.
With only 500 replicates the standard error is as large as the finite-gamma
bias, so compare the two columns rather than expecting a clean 1/gamma trend.

    python3 demos/small_study.py [out_dir]
"""
import sys

from pbsrdd.config import config_from_dict
from pbsrdd.study import run_study

cfg = config_from_dict({
    "gamma": [25, 50, 100],
    "replicates": 500,
    "t_end": 10.0,
    "record_count": 21,
    "snapshot_times": [2.0],
    "domain": {"N": 64},
    "solver": {"N": 256, "dt_max": 1e-3},
    "compare_no_potential": False,
})
out = sys.argv[1] if len(sys.argv) > 1 else "demo_study"
res = run_study(cfg, out_dir=out, progress=print)

print(f"\n{'gamma':>6} {'sup |particle - mean field|':>28} {'se at sup':>10}")
for g in res.gammas:
    print(f"{g.gamma:>6} {g.sup_error:>28.5f} {g.sup_se:>10.5f}")
print(f"\nCSV files and plots in {out}/")
