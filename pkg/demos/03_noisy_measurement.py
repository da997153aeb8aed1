"""How much measurement noise the inertia fit tolerates.

White Gaussian noise is added to the reference with a standard deviation
given as a fraction of the signal's RMS value.  The mean-square loss averages
the noise away, so the fitted H barely moves.

Run:  python3 demos/03_noisy_measurement.py [seed]
"""

import sys
import tempfile
from pathlib import Path

import yaml

from adpower.cli_io import load_config, run_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
config = Path(__file__).resolve().parents[1] / "configs" / "identify_h.yaml"
root = Path(tempfile.mkdtemp(prefix="noise_"))

print(f"seed {seed}")
for level in (0.0, 0.05, 0.10, 0.20):
    out = root / f"noise_{level:g}"
    run_experiment(load_config(config, {"out": out, "noise": level, "seed": seed}))
    s = yaml.safe_load((out / "summary.yaml").read_text())
    print(f"  noise {100 * level:4.0f} % of RMS: H = {s['final_params']['G1.H']:.5f} s, "
          f"error {s['relative_error_pct']['G1.H']:+.3f} %")
print(f"noisy references and traces under {root}")
