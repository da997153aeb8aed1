"""Where would gradient descent get stuck?

Each generator parameter is swept from 50 % to 200 % of its true value with
the others held fixed.  At every grid point the loss against the true
trajectory and its gradient come from one lane of a batched run.  A gradient
sign change away from 100 % marks a local optimum.

Run:  python3 demos/05_loss_landscape.py
"""

import csv
import tempfile
from pathlib import Path

import yaml

from adpower.cli_io import load_config, run_experiment

config = Path(__file__).resolve().parents[1] / "configs" / "scan.yaml"
out = Path(tempfile.mkdtemp(prefix="scan_"))
run_experiment(load_config(config, {"out": out}))
s = yaml.safe_load((out / "summary.yaml").read_text())

rows = {}
with (out / "scan.csv").open() as fh:
    for r in csv.DictReader(fh):
        rows.setdefault(r["parameter"], []).append(r)

print("normalised gradient sign per grid point (50 % ... 200 %); x = invalid parameter set")
for name, cells in rows.items():
    if all(float(c["value"]) == 0.0 for c in cells):
        print(f"  {name:10s} (true value 0: every grid point is the same model)")
        continue
    marks = "".join("x" if c["valid"] == "0" else
                    ("+" if float(c["grad"]) > 0 else "-" if float(c["grad"]) < 0 else "0")
                    for c in cells)
    flag = f"  local optima near {s['sign_changes'][name]}" if s["sign_changes"][name] else ""
    print(f"  {name:10s} {marks}{flag}")
print(f"grid in {out / 'scan.csv'}")
