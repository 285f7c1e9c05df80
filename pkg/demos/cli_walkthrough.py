"""Drive the command line end to end from a generated config file.

Equivalent shell session:

    pcml run --config config.json
    pcml evaluate --out runs/demo
    pcml plot --csv runs/demo/trajectory_0.csv --kind trajectory --out traj.svg
"""

import json
from pathlib import Path

from pcml.cli import main

here = Path(__file__).resolve().parent
out = here / "runs" / "demo"

config = {
    "problem": "reactor",
    "n_train": 10,
    "n_test": 20,
    "model": {"hidden": [8], "target_step": 0.5},
    "train": {"mode": "hard_sequential", "learning_rate": 0.05, "max_epochs": 40},
    "seeds": [0, 1],
    "out": str(out),
}
cfg_path = here / "config.json"
cfg_path.write_text(json.dumps(config, indent=2), encoding="utf-8")

print("$ pcml run --config config.json --force")
rc = main(["run", "--config", str(cfg_path), "--force"])
print(f"(exit {rc})\n")

print("artifacts:")
for p in sorted(out.iterdir()):
    print(f"  {p.relative_to(here)}")
print()

print("$ pcml evaluate --out runs/demo")
rc = main(["evaluate", "--out", str(out)])
print(f"(exit {rc})\n")

manifest = json.loads((out / "run_manifest.json").read_text(encoding="utf-8"))
print("seeds recorded in the manifest:", manifest["seeds"])
