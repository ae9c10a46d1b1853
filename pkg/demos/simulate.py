"""
Closed-loop runs in the dynamic arena
=====================================

One scenario is run with logging, then a small batch summarises success,
energy and planner latency.  The same batches are available from the
command line (``python3 -m airground batch``).
"""
import sys

import numpy as np

from airground.scenarios import default_scenario, low_wall_scenario
from airground.sim import run_batch, run_scenario

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 5
cfg = default_scenario()

r = run_scenario(cfg, seed=0)
print(f"seed 0: success={r.success} time={r.moving_time:.1f} s energy={r.energy:.0f} J "
      f"aerial={r.aerial_time:.1f} s replans={r.replans}")
reasons = {}
for e in r.replan_log:
    key = e["reason"].split(":")[0]
    reasons[key] = reasons.get(key, 0) + 1
print("replan outcomes:", reasons)

report = run_batch(cfg, trials)
s = report.summary()
print(f"{trials} trials: success {s['success_rate']:.2f}, mean energy {s['mean_energy']:.0f} J, "
      f"median planner time {np.median(report.planning_times_ms):.1f} ms")

for lam in (0.0, 4.0):
    s = run_batch(low_wall_scenario(lam), trials).summary()
    print(f"low wall, energy weight {lam}: aerial fraction {s['mean_aerial_fraction']:.2f}")
