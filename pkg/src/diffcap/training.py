"""Losses and the training loop for the diffusion captioner and its AR twin."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import numerics as nx
from .checkpoint import Checkpoint, CheckpointError, check_shapes, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .scenegen import CaptionedScene, load_dataset, scene_features
from .schedule import NoiseSchedule, build_schedule, corrupt
from .textcodec import Vocabulary, build_vocab, encode

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class Batch:
    ids: np.ndarray  # (B, L_max) with PAD suffix
    lengths: np.ndarray  # (B,)
    features: np.ndarray  # (B, n_cond, feature_dim)

    def __len__(self) -> int:
        return len(self.lengths)

    def take(self, idx) -> "Batch":
        return Batch(self.ids[idx], self.lengths[idx], self.features[idx])


def encode_records(records: list[CaptionedScene], vocab: Vocabulary, l_max: int) -> Batch:
    ids = np.empty((len(records), l_max), dtype=np.int64)
    lengths = np.empty(len(records), dtype=np.int64)
    feats = np.empty((len(records),) + scene_features(records[0].scene).shape) if records else np.empty((0, 10, 9))
    for i, rec in enumerate(records):
        ids[i], lengths[i] = encode(rec.caption, vocab, l_max)
        feats[i] = scene_features(rec.scene)
    return Batch(ids, lengths, feats)


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0."""
    warm = int(round(cfg.warmup_frac * total))
    if step < warm:
        return cfg.lr * step / warm
    progress = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


# ------------------------------------------------------------ diffusion loss


@dataclass
class DiffusionInputs:
    xt: np.ndarray
    t: np.ndarray
    null_mask: np.ndarray


def draw_diffusion_inputs(
    batch: Batch,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    image_free_ratio: float,
    config: dn.DenoiserConfig,
    pad_is_token: bool = False,
    force_t: int | None = None,
) -> DiffusionInputs:
    B = len(batch)
    t = np.full(B, force_t) if force_t is not None else rng.integers(1, schedule.T + 1, size=B)
    xt = np.empty_like(batch.ids)
    for b in range(B):
        xt[b] = corrupt(
            batch.ids[b], int(t[b]), schedule, rng, mask_id=config.mask_id, pad_id=config.pad_id, pad_is_token=pad_is_token
        )
    null_mask = rng.random(B) < image_free_ratio
    return DiffusionInputs(xt, t, null_mask)


def _position_weights(valid: np.ndarray) -> np.ndarray:
    """Average over valid positions per example, then over the batch."""
    counts = np.maximum(valid.sum(axis=1, keepdims=True), 1)
    return valid / counts / len(valid)


def diffusion_objective(
    params: dn.Params,
    config: dn.DenoiserConfig,
    batch: Batch,
    inputs: DiffusionInputs,
    *,
    cam: str = "both",
    length_weight: float = 0.2,
    length_prediction: bool = True,
    length_features: np.ndarray | None = None,
) -> tuple[nx.Tensor, dict]:
    """Cross-entropy of x0 given x_t plus the weighted length loss.

    ``length_features`` replaces the (detached) condition summary fed to
    the length head; gradient checks use it to hold that input constant.
    """
    pad_is_token = not length_prediction
    allowed = dn.self_attention_mask(inputs.xt, config, cam, pad_is_token)
    p = dn.effective_timestep(inputs.t, config.T, config.step_scale)
    logits, summary = dn.forward(params, config, inputs.xt, p, batch.features, allowed, inputs.null_mask)
    valid = np.ones(batch.ids.shape, bool) if pad_is_token else batch.ids != config.pad_id
    diff = nx.cross_entropy(logits, batch.ids, _position_weights(valid))
    parts = {"diffusion": float(diff.data)}
    loss = diff
    if length_prediction and length_weight > 0:
        feat = summary if length_features is None else length_features
        len_logits = dn.length_logits(params, feat)
        len_loss = nx.cross_entropy(len_logits, np.clip(batch.lengths - 1, 0, config.l_max - 1))
        parts["length"] = float(len_loss.data)
        loss = loss + len_loss * length_weight
    return loss, parts


def _check_finite(loss: nx.Tensor, batch: Batch, step: int) -> None:
    if not np.isfinite(loss.data):
        raise DivergenceError(
            f"non-finite loss at step {step} (batch of {len(batch)}, lengths {sorted(set(batch.lengths.tolist()))})"
        )


def diffusion_step_loss(
    params: dn.Params,
    config: dn.DenoiserConfig,
    batch: Batch,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    force_t: int | None = None,
    step: int = 0,
) -> tuple[nx.Tensor, dict[str, np.ndarray], dict]:
    inputs = draw_diffusion_inputs(
        batch, schedule, rng, train_cfg.image_free_ratio, config, not train_cfg.length_prediction, force_t
    )
    with nx.GradTape() as tape:
        loss, parts = diffusion_objective(
            params,
            config,
            batch,
            inputs,
            cam=train_cfg.cam,
            length_weight=train_cfg.length_weight,
            length_prediction=train_cfg.length_prediction,
        )
    _check_finite(loss, batch, step)
    grads = tape.backward(loss, params)
    parts["n_image_free"] = int(inputs.null_mask.sum())
    return loss, grads, parts


# ------------------------------------------------------------------ AR loss


def ar_inputs(batch: Batch, config: dn.DenoiserConfig) -> tuple[np.ndarray, np.ndarray]:
    """Shifted inputs (MASK as BOS) and per-position loss weights.

    Targets are ``batch.ids`` themselves: position ``N`` predicts PAD,
    which doubles as end-of-sequence.
    """
    B, L = batch.ids.shape
    x_in = np.concatenate([np.full((B, 1), config.mask_id, dtype=np.int64), batch.ids[:, : L - 1]], axis=1)
    valid = np.arange(L)[None, :] <= np.minimum(batch.lengths, L - 1)[:, None]
    return x_in, _position_weights(valid)


def ar_objective(params: dn.Params, config: dn.DenoiserConfig, batch: Batch) -> nx.Tensor:
    x_in, weights = ar_inputs(batch, config)
    logits = dn.forward_ar(params, config, x_in, batch.features)
    return nx.cross_entropy(logits, batch.ids, weights)


def ar_step_loss(params, config, batch: Batch, step: int = 0):
    with nx.GradTape() as tape:
        loss = ar_objective(params, config, batch)
    _check_finite(loss, batch, step)
    return loss, tape.backward(loss, params), {"ar": float(loss.data)}


# -------------------------------------------------------------- grad check


def gradcheck_denoiser(dtype=np.float64, seed: int = 0, max_entries: int = 24) -> nx.GradCheckReport:
    """Tape vs central-difference gradients on a 2-layer, 32-wide denoiser.

    The loss exercises AdaLN, CAM self-attention, cross-attention with a
    partial null-condition swap, the output head and the length head.
    """
    rng = np.random.default_rng(seed)
    with nx.precision(dtype):
        cfg = dn.DenoiserConfig(vocab_size=9, layers=2, d_model=32, heads=2, d_ff=64, l_max=6, init_std=0.3)
        params = dn.init_params(cfg, seed)
        B = 3
        lengths = np.array([6, 4, 3])
        ids = rng.integers(0, cfg.vocab_size - 2, size=(B, cfg.l_max))
        ids[np.arange(cfg.l_max)[None, :] >= lengths[:, None]] = cfg.pad_id
        feats = rng.random((B, cfg.n_cond, cfg.feature_dim))
        batch = Batch(ids, lengths, feats)
        xt = ids.copy()
        xt[0, [1, 3]] = cfg.mask_id
        xt[1, 0] = cfg.mask_id
        xt[2, [0, 1, 2]] = cfg.mask_id
        inputs = DiffusionInputs(xt, np.array([3, 7, 20]), np.array([False, True, False]))
        frozen_summary = dn.summary_feature(params, feats).data.copy()

        def loss_fn(p):
            loss, _ = diffusion_objective(p, cfg, batch, inputs, length_features=frozen_summary)
            return loss

        return nx.finite_difference_check(loss_fn, params, max_entries=max_entries, seed=seed)


# ------------------------------------------------------------ training loop


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild ``(Denoiser, RunConfig, Vocabulary)`` from a checkpoint."""
    from .sampler import Denoiser

    run = RunConfig.from_dict(ckpt.config)
    vocab = Vocabulary(tuple(ckpt.vocab))
    dcfg = run.model.denoiser_config(vocab.size)
    with nx.precision(ckpt.dtype):
        check_shapes(ckpt.params, dn.init_params(dcfg, 0))
    schedule = build_schedule(run.model.T, vocab.n_text, run.model.c_u)
    return Denoiser(ckpt.params, dcfg, schedule, pad_is_token=not run.train.length_prediction), run, vocab


def _validation_scores(model, run: RunConfig, val: Batch) -> tuple[float, float]:
    from . import metrics
    from .sampler import SamplerConfig, decode_ar, sample_captions

    if run.train.mode == "ar":
        preds = decode_ar(model, val.features)
    else:
        s = run.sampler.guidance_scale if run.train.image_free_ratio > 0 else 1.0
        scfg = SamplerConfig(
            guidance_scale=s,
            use_cam=run.train.cam != "off",
            cam_rules=run.train.cam if run.train.cam != "off" else "both",
            length="oracle" if run.train.length_prediction else str(model.config.l_max),
            seed=run.seed,
        )
        preds = sample_captions(model, val.features, scfg, oracle_lengths=val.lengths)
    refs = [row[:n].tolist() for row, n in zip(val.ids, val.lengths)]
    return metrics.corpus_token_accuracy(preds, refs), metrics.exact_match(preds, refs)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train(run: RunConfig, out_dir, resume: str | Path | None = None) -> TrainResult:
    """Train per ``run`` and write ``best.ckpt``, ``last.ckpt``, ``metrics.jsonl``."""
    if run.data is None:
        raise ValueError("run config has no dataset path")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = run.train
    dtype = np.dtype(tc.precision)

    records = load_dataset(run.data)
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise ValueError(f"{run.data}: no training records")
    vocab = build_vocab(r.caption for r in train_recs)
    vocab.save(out_dir / "vocab.txt")
    dcfg = run.model.denoiser_config(vocab.size)
    train_b = encode_records(train_recs, vocab, dcfg.l_max)
    val_b = encode_records(val_recs[: tc.val_limit] if tc.val_limit else val_recs, vocab, dcfg.l_max)
    schedule = build_schedule(run.model.T, vocab.n_text, run.model.c_u)

    from .sampler import Denoiser

    with nx.precision(dtype):
        params = dn.init_params(dcfg, run.seed)
    opt = nx.AdamWState(lr=0.0, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(run.seed)
    start_epoch = 0
    best_acc = -1.0
    log_path = out_dir / "metrics.jsonl"
    best_path, last_path = out_dir / "best.ckpt", out_dir / "last.ckpt"

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.vocab != list(vocab.tokens):
            raise CheckpointError("resume checkpoint was trained on a different vocabulary")
        check_shapes(ck.params, params)
        params = ck.params
        opt = ck.optimizer or opt
        start_epoch = ck.epoch
        rng.bit_generator.state = ck.extra["rng_state"]
        best_acc = ck.extra.get("best_val_token_acc", -1.0)
    else:
        log_path.write_text("")

    model = Denoiser(params, dcfg, schedule, pad_is_token=not tc.length_prediction)
    n = len(train_b)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * steps_per_epoch
    history = []
    t0 = time.perf_counter()
    snapshot = run.to_dict()

    def make_ckpt(epoch: int, with_opt: bool, best: float) -> Checkpoint:
        extra = {"rng_state": _rng_state(rng), "best_val_token_acc": best}
        return Checkpoint(snapshot, params, list(vocab.tokens), opt.step, epoch, opt if with_opt else None, extra)

    with nx.precision(dtype):
        for epoch in range(start_epoch, tc.epochs):
            order = rng.permutation(n)
            losses = []
            for s in range(steps_per_epoch):
                batch = train_b.take(order[s * tc.batch_size : (s + 1) * tc.batch_size])
                if tc.mode == "ar":
                    loss, grads, _ = ar_step_loss(params, dcfg, batch, opt.step)
                else:
                    loss, grads, _ = diffusion_step_loss(params, dcfg, batch, schedule, rng, tc, step=opt.step)
                nx.clip_grad_norm(grads, tc.grad_clip)
                opt.lr = lr_at(opt.step, total, tc)
                nx.adamw_step(params, grads, opt)
                losses.append(float(loss.data))

            val_acc, val_em = _validation_scores(model, run, val_b) if len(val_b) else (float("nan"),) * 2
            rec = {
                "epoch": epoch,
                "step": opt.step,
                "lr": opt.lr,
                "loss": float(np.mean(losses)),
                "val_token_acc": val_acc,
                "val_exact_match": val_em,
            }
            history.append(rec)
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.info("epoch %d loss %.4f val_tok %.4f val_em %.4f", epoch, rec["loss"], val_acc, val_em)
            if val_acc > best_acc:
                best_acc = val_acc
                save_checkpoint(best_path, make_ckpt(epoch + 1, False, best_acc))
            save_checkpoint(last_path, make_ckpt(epoch + 1, True, best_acc))

    if not best_path.exists():
        save_checkpoint(best_path, make_ckpt(start_epoch, False, best_acc))
        save_checkpoint(last_path, make_ckpt(start_epoch, True, best_acc))
    return TrainResult(best_path, last_path, log_path, history, time.perf_counter() - t0)
