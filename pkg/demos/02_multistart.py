"""Eight initial guesses for H, optimised together in one batched simulation.

Each lane of the tape carries its own H.  Every iteration runs a single
simulation whose arrays hold all eight trajectories side by side.

Run:  python3 demos/02_multistart.py
"""

import tempfile
from pathlib import Path

import numpy as np
import yaml

from adpower.cli_io import load_config, run_experiment

config = Path(__file__).resolve().parents[1] / "configs" / "identify_h_multistart.yaml"
out = Path(tempfile.mkdtemp(prefix="multistart_"))
code = run_experiment(load_config(config, {"out": out}))
s = yaml.safe_load((out / "summary.yaml").read_text())

print(f"exit code {code}; {s['simulations']} simulations for {s['lanes']} lanes")
for h0, h1, e in zip(s["initial_params"]["G1.H"], s["lane_final_params"]["G1.H"],
                     s["lane_relative_error_pct"]["G1.H"]):
    print(f"  start {h0:6.3f} s -> {h1:.6f} s   ({e:+.1e} %)")
print("lane statuses:", ", ".join(s["lane_status"]))
print(f"best lane {s['best_lane']}; artifacts in {out}")
print("worst |error| %.2e %%" % np.max(np.abs(s["lane_relative_error_pct"]["G1.H"])))
