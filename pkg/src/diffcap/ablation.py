"""Ablation grids: train each distinct variant once, then evaluate every row."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import numerics as nx
from .checkpoint import load_checkpoint
from .config import RunConfig
from .evaluation import evaluate
from .sampler import SamplerConfig
from .scenegen import load_dataset
from .textcodec import L_MAX
from .training import model_from_checkpoint, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    train: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)


def _table_row(name: str, best_first: bool, cam: bool, length: bool, image_free: bool) -> Variant:
    train = {"cam": "both" if cam else "off", "length_prediction": length}
    if not image_free:
        train["image_free_ratio"] = 0.0
    return Variant(name, train, {"best_first": best_first, "use_cam": cam})


GRIDS: dict[str, list[Variant]] = {
    # one component removed at a time from the full model
    "components": [
        Variant("full"),
        Variant("no_cam", {"cam": "off"}, {"use_cam": False}),
        Variant("no_best_first", {}, {"best_first": False}),
        Variant("m2m_only", {"cam": "m2m"}, {"cam_rules": "m2m"}),
        Variant("t2m_only", {"cam": "t2m"}, {"cam_rules": "t2m"}),
    ],
    # cumulative component table: best-first, CAM, length prediction, image-free
    "cumulative": [
        _table_row("a", False, False, False, False),
        _table_row("b", False, True, False, False),
        _table_row("c", True, False, False, False),
        _table_row("d", True, False, True, False),
        _table_row("e", True, True, False, False),
        _table_row("f", True, True, True, False),
        _table_row("g", True, True, True, True),
    ],
    "timestep": [
        Variant("sinusoidal", model={"timestep_embedding": "sinusoidal"}),
        Variant("learned", model={"timestep_embedding": "learned"}),
        Variant("none", model={"timestep_embedding": "none"}),
    ],
}


def training_key(run: RunConfig) -> str:
    """Hash of everything that influences training (sampler settings excluded)."""
    d = run.to_dict()
    d.pop("sampler")
    d.pop("deterministic")
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def ensure_trained(run: RunConfig, root) -> Path:
    """Train ``run`` under ``root/<key>`` unless a finished run is already there."""
    out = Path(root) / training_key(run)
    best = out / "best.ckpt"
    done = out / "done.json"
    if best.exists() and done.exists():
        return best
    log.info("training variant %s", out.name)
    result = train(run, out)
    done.write_text(json.dumps({"wall_seconds": result.wall_seconds, "config": run.to_dict()}, sort_keys=True))
    return best


def variant_run(base: RunConfig, v: Variant) -> RunConfig:
    run = base.with_updates(model=v.model, train=v.train)
    sampler = dict(v.sampler)
    if not run.train.length_prediction:
        sampler.setdefault("length", str(L_MAX))
    if run.train.image_free_ratio == 0:
        sampler.setdefault("guidance_scale", 1.0)
    return run.with_updates(sampler=sampler)


def run_grid(base: RunConfig, grid: str, out_dir, split: str = "test", limit: int | None = None) -> dict:
    records = load_dataset(base.data, split)
    if limit:
        records = records[:limit]
    rows = []
    for v in GRIDS[grid]:
        run = variant_run(base, v)
        ckpt = load_checkpoint(ensure_trained(run, Path(out_dir) / "models"))
        model, _, vocab = model_from_checkpoint(ckpt)
        scfg = SamplerConfig(**{**asdict(run.sampler), "seed": base.seed})
        with nx.precision(ckpt.dtype):
            report, _ = evaluate(model, records, vocab, scfg)
        rows.append({"name": v.name, "training_key": training_key(run), "report": asdict(report)})
    return {"grid": grid, "split": split, "rows": rows}
