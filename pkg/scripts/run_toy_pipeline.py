"""Generate the toy dataset, train a diffusion captioner and evaluate it.

    python3 scripts/run_toy_pipeline.py --out runs/toy [--epochs 30] [--ar]
"""

import argparse
import sys
from pathlib import Path

from diffcap.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.json"


def run(argv: list[str]) -> None:
    print("+ diffcap", " ".join(argv), flush=True)
    code = main(argv)
    if code:
        sys.exit(code)


def parse() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ar", action="store_true", help="also train and evaluate the autoregressive baseline")
    return ap.parse_args()


if __name__ == "__main__":
    args = parse()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = str(out / "scenes.jsonl")
    common = ["--seed", str(args.seed), "--deterministic", "-v"]
    epochs = ["--epochs", str(args.epochs)] if args.epochs is not None else []
    run(["gen-data", "--n", str(args.n), "--out", data, *common])
    modes = ["diffusion", "ar"] if args.ar else ["diffusion"]
    for mode in modes:
        run_dir = out / mode
        run(["train", "--config", str(CONFIG), "--data", data, "--out", str(run_dir), "--mode", mode, *epochs, *common])
        ckpt = str(run_dir / "best.ckpt")
        run(["eval", "--checkpoint", ckpt, "--input", data, "--length", "oracle", "--out", str(run_dir / "eval_oracle.json"), *common])
        run(["eval", "--checkpoint", ckpt, "--input", data, "--out", str(run_dir / "eval_predicted.json"), "--captions", str(run_dir / "test_captions.txt"), *common])
    print((out / "diffusion" / "eval_oracle.json").read_text())
