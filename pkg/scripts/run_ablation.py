"""Train and score an ablation grid (components, cumulative or timestep) on the toy dataset.

    python3 scripts/run_ablation.py --grid components --out runs/ablation
"""

import argparse
import sys
from pathlib import Path

from diffcap.cli import main
from diffcap.scenegen import generate_dataset

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.json"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="components")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--limit", type=int)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "scenes.jsonl"
    if not data.exists():
        generate_dataset(5000, 0, data)
    argv = ["ablate", "--config", str(CONFIG), "--data", str(data), "--out", str(out), "--grid", args.grid, "--deterministic", "-v"]
    if args.epochs is not None:
        argv += ["--epochs", str(args.epochs)]
    if args.limit:
        argv += ["--limit", str(args.limit)]
    sys.exit(main(argv))
