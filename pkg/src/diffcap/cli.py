"""Command line entry point: ``diffcap <command> [flags]``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .evaluation import evaluate, fill_holes
from .sampler import SamplerConfig, decode_ar, sample_captions, write_trace
from .scenegen import COLORS, Scene, generate_dataset, load_dataset, scene_features
from .schedule import ScheduleError, build_schedule
from .textcodec import MASK_TOKEN, CodecError, Vocabulary, decode, encode
from .training import DivergenceError, gradcheck_denoiser, model_from_checkpoint, train

log = logging.getLogger("diffcap")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


@contextlib.contextmanager
def _determinism(enabled: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    updates: dict = {}
    if getattr(args, "data", None):
        updates["data"] = args.data
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.deterministic:
        updates["deterministic"] = True
    train = {}
    if getattr(args, "mode", None):
        train["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "no_cam", False) and args.command == "train":
        train["cam"] = "off"
    if train:
        updates["train"] = train
    return run.with_updates(**updates) if updates else run


def _sampler_config(args, base: SamplerConfig, seed: int) -> SamplerConfig:
    d = asdict(base)
    d["seed"] = seed
    if args.guidance_scale is not None:
        d["guidance_scale"] = args.guidance_scale
    if args.length is not None:
        d["length"] = args.length
    if args.no_cam:
        d["use_cam"] = False
    if args.no_best_first:
        d["best_first"] = False
    try:
        return SamplerConfig(**d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class Loaded:
    model: object
    run: RunConfig
    vocab: Vocabulary
    ar: bool


def _load_model(args) -> Loaded:
    ckpt = load_checkpoint(args.checkpoint)
    model, run, vocab = model_from_checkpoint(ckpt)
    if args.vocab:
        given = Vocabulary.load(args.vocab)
        if given.tokens != vocab.tokens:
            raise CodecError(f"vocabulary {args.vocab} does not match the checkpoint's ({given.size} vs {vocab.size} tokens)")
    if run.train.cam == "off" and not args.no_cam:
        log.info("model was trained without CAM; sampling without it too")
        args.no_cam = True
    return Loaded(model, run, vocab, run.train.mode == "ar")


def _seed(args, run: RunConfig) -> int:
    return run.seed if args.seed is None else args.seed


def _write_lines(path, lines) -> None:
    text = "".join(line + "\n" for line in lines)
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_inputs(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise UsageError(f"{path}:{k}: invalid JSON ({exc})") from None
    return rows


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    generate_dataset(args.n, 0 if args.seed is None else args.seed, args.out)
    log.info("wrote %d scenes to %s", args.n, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    if run.data is None:
        raise UsageError("no dataset: pass --data or set 'data' in the config")
    if not Path(run.data).exists():
        raise UsageError(f"dataset {run.data} does not exist")
    result = train(run, args.out, resume=args.resume)
    log.info("trained in %.1f s; best checkpoint %s", result.wall_seconds, result.best_path)
    Path(args.out, "timing.json").write_text(json.dumps({"wall_seconds": result.wall_seconds}) + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    lm = _load_model(args)
    records = load_dataset(args.input, None if args.split == "all" else args.split)
    if args.limit:
        records = records[: args.limit]
    if not records:
        raise UsageError(f"{args.input}: no scenes in split {args.split!r}")
    feats = np.stack([scene_features(r.scene) for r in records])
    scfg = _sampler_config(args, lm.run.sampler, _seed(args, lm.run))
    oracle = None
    if scfg.length == "oracle":
        oracle = [len(r.caption.split()) for r in records]
    traces = [[] for _ in records] if args.trace else None
    with nx.precision(lm.model.params["tok_emb"].dtype):
        if lm.ar:
            caps = decode_ar(lm.model, feats)
        else:
            caps = sample_captions(lm.model, feats, scfg, oracle_lengths=oracle, traces=traces)
    _write_lines(args.out, [decode(c, lm.vocab) for c in caps])
    if traces is not None:
        write_trace(args.trace, traces, lm.vocab)
    return EXIT_OK


def cmd_infill(args) -> int:
    """Inputs are JSONL rows with ``scene`` and either ``template`` or ``caption``.

    A row without a template gets one by blanking the caption's color words.
    """
    lm = _load_model(args)
    rows = _read_inputs(args.input)
    if not rows:
        raise UsageError(f"{args.input}: no input rows")
    l_max = lm.model.config.l_max
    feats, templates = [], []
    for k, row in enumerate(rows):
        if "scene" not in row:
            raise UsageError(f"{args.input}: row {k + 1} has no scene")
        feats.append(scene_features(Scene.from_dict(row["scene"])))
        if "template" in row:
            ids, n = encode(row["template"], lm.vocab, l_max)
            templates.append(ids[:n].tolist())
        elif "caption" in row:
            blanked = " ".join(MASK_TOKEN if w in COLORS else w for w in row["caption"].lower().split())
            ids, n = encode(blanked, lm.vocab, l_max)
            templates.append(ids[:n].tolist())
        else:
            raise UsageError(f"{args.input}: row {k + 1} needs a template or a caption")
    scfg = _sampler_config(args, lm.run.sampler, _seed(args, lm.run))
    traces = [[] for _ in rows] if args.trace else None
    with nx.precision(lm.model.params["tok_emb"].dtype):
        filled = fill_holes(lm.model, np.stack(feats), templates, scfg, lm.ar, traces)
    _write_lines(args.out, [decode(f, lm.vocab) for f in filled])
    if traces is not None:
        write_trace(args.trace, traces, lm.vocab)
    return EXIT_OK


def cmd_eval(args) -> int:
    lm = _load_model(args)
    records = load_dataset(args.input, args.split)
    if args.limit:
        records = records[: args.limit]
    scfg = _sampler_config(args, lm.run.sampler, _seed(args, lm.run))
    with nx.precision(lm.model.params["tok_emb"].dtype):
        report, caps = evaluate(lm.model, records, lm.vocab, scfg, ar=lm.ar, with_infill=not args.no_infill)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.captions:
        _write_lines(args.captions, [decode(c, lm.vocab) for c in caps])
    return EXIT_OK


def cmd_inspect_schedule(args) -> int:
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        run = RunConfig.from_dict(ck.config)
        sched = build_schedule(run.model.T, len(ck.vocab) - 2, run.model.c_u)
    else:
        sched = build_schedule(args.T, args.n_text, args.c_u)
    _write_lines(args.out, sched.to_tsv().rstrip("\n").split("\n"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.dtype(args.precision)
    report = gradcheck_denoiser(dtype, 0 if args.seed is None else args.seed)
    tol = 1e-5 if dtype == np.float64 else 1e-3
    worst = sorted(report.per_group.items(), key=lambda kv: -kv[1])[:5]
    print(f"precision {dtype.name}: max relative error {report.max_rel_error:.3e} (tolerance {tol:g})")
    for name, err in worst:
        print(f"  {name:16s} {err:.3e}")
    return EXIT_OK if report.passed(tol) else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .ablation import GRIDS, run_grid

    base = _run_config(args)
    if base.data is None:
        raise UsageError("no dataset: pass --data or set 'data' in the config")
    if args.grid not in GRIDS:
        raise UsageError(f"unknown grid {args.grid!r}; choose from {sorted(GRIDS)}")
    table = run_grid(base, args.grid, args.out, split=args.split, limit=args.limit)
    text = json.dumps(table, sort_keys=True, indent=2) + "\n"
    Path(args.out, f"ablation_{args.grid}.json").write_text(text, encoding="utf-8")
    for row in table["rows"]:
        r = row["report"]
        print(f"{row['name']:16s} tok {r['token_accuracy']:.4f}  em {r['exact_match']:.4f}  bleu4 {r['bleu4']:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocabulary file that must match the checkpoint")
    p.add_argument("--guidance-scale", type=float)
    p.add_argument("--length", help="oracle, predicted or an integer")
    p.add_argument("--no-cam", action="store_true")
    p.add_argument("--no-best-first", action="store_true")
    p.add_argument("--trace", help="write per-step denoising states as JSONL")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="diffcap", description="Discrete diffusion caption generator on synthetic scenes.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene/caption dataset")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a diffusion or AR captioner")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("diffusion", "ar"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-cam", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="caption scenes from a dataset file")
    _sampling_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("infill", parents=[common], help="fill [MASK] holes in caption templates")
    _sampling_flags(p)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infill)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset split")
    _sampling_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int)
    p.add_argument("--captions", help="also write generated captions here")
    p.add_argument("--no-infill", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-schedule", parents=[common], help="print the corruption schedule as TSV")
    p.add_argument("--checkpoint")
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--n-text", type=int, default=2)
    p.add_argument("--c-u", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_schedule)

    p = sub.add_parser("gradcheck", parents=[common], help="compare tape and finite-difference gradients")
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate an ablation grid")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="components")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


USAGE_ERRORS = (UsageError, ConfigError, CodecError, CheckpointError, ScheduleError, FileNotFoundError, KeyError)
RUNTIME_ERRORS = (DivergenceError, nx.NumericalError, RuntimeError, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with _determinism(args.deterministic):
            return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
