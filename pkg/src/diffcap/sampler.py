"""Inference: best-first denoising, guidance, infilling and AR decoding.

Sequences sharing a length (and hole count, for infilling) are denoised in
lockstep. Each example owns an RNG stream seeded from ``(seed, index)``
so results do not depend on how examples are grouped into batches.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import denoiser as dn
from . import numerics as nx
from .schedule import NoiseSchedule, corrupt

log = logging.getLogger(__name__)

LENGTH_SOURCES = ("predicted", "oracle")


@dataclass
class SamplerConfig:
    guidance_scale: float = 1.17
    best_first: bool = True
    use_cam: bool = True
    cam_rules: str = "both"
    length: str = "predicted"  # "predicted", "oracle" or an integer
    selection: str = "greedy"  # "greedy" or "sample"
    step_rescale: str = "denominator"  # or "multiply"
    seed: int = 0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.selection not in ("greedy", "sample"):
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.step_rescale not in ("denominator", "multiply"):
            raise ValueError(f"unknown step rescale {self.step_rescale!r}")
        if self.cam_rules not in dn.CAM_RULES:
            raise ValueError(f"unknown CAM rules {self.cam_rules!r}")
        self.length = str(self.length)
        if self.length not in LENGTH_SOURCES and not self.length.isdigit():
            raise ValueError(f"length must be predicted, oracle or an integer, got {self.length!r}")

    @property
    def cam(self) -> str:
        return self.cam_rules if self.use_cam else "off"


@dataclass
class Step:
    t: float  # schedule-level timestep of this step
    keep: int
    p: float  # effective timestep fed to AdaLN
    level_after: float  # corruption level for still-unfixed positions


# ------------------------------------------------------------ keep schedule


def plan_keep_schedule(n_l: int, T: int) -> list[int]:
    """Tokens to fix at each step, in execution order."""
    if n_l < 1 or T < 1:
        raise ValueError(f"need N_L >= 1 and T >= 1, got {n_l}, {T}")
    if n_l <= T:
        return [1] * n_l
    return [(n_l * (T - t + 1)) // T - (n_l * (T - t)) // T for t in range(T, 0, -1)]


def plan_steps(n_l: int, T: int, step_scale: float, config: SamplerConfig) -> list[Step]:
    if not config.best_first:
        return [Step(t, 0, t * step_scale / T, t - 1) for t in range(T, 0, -1)]
    keep = plan_keep_schedule(n_l, T)
    if n_l > T:
        return [Step(t, k, t * step_scale / T, t - 1) for t, k in zip(range(T, 0, -1), keep)]

    ratio = T / n_l if config.step_rescale == "denominator" else n_l / T
    steps = []
    for i in range(n_l, 0, -1):
        t_eff = i * ratio
        steps.append(Step(t_eff, 1, t_eff * step_scale / T, (i - 1) * ratio))
    return steps


# ------------------------------------------------------------------ guidance


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def guided_logprobs(
    logits_cond: np.ndarray | None, logits_uncond: np.ndarray | None, s: float
) -> np.ndarray:
    """``log p(x0|f) + s * (log p(x0|y) - log p(x0|f))``, renormalised."""
    if s == 1.0:
        return _log_softmax(logits_cond)
    if s == 0.0:
        return _log_softmax(logits_uncond)
    if logits_cond.shape != logits_uncond.shape:
        raise nx.ShapeError(f"guidance: {logits_cond.shape} vs {logits_uncond.shape}")
    lu = _log_softmax(logits_uncond)
    lc = _log_softmax(logits_cond)
    return _log_softmax(lu + s * (lc - lu))


# ----------------------------------------------------------- core denoising


class Denoiser:
    """Bundles parameters, architecture and the corruption schedule."""

    def __init__(self, params, config: dn.DenoiserConfig, schedule: NoiseSchedule, pad_is_token=False):
        self.params = params
        self.config = config
        self.schedule = schedule
        self.pad_is_token = pad_is_token

    @property
    def n_text(self) -> int:
        return self.config.vocab_size - 2

    def candidate_mask(self) -> np.ndarray:
        ok = np.zeros(self.config.vocab_size, dtype=bool)
        ok[: self.n_text] = True
        if self.pad_is_token:
            ok[self.config.pad_id] = True
        return ok

    def logits(self, ids, p, features, cam: str) -> np.ndarray:
        allowed = dn.self_attention_mask(ids, self.config, cam, self.pad_is_token)
        out, _ = dn.forward(self.params, self.config, ids, p, features, allowed)
        return out.data

    def predicted_lengths(self, features: np.ndarray) -> np.ndarray:
        summary = dn.summary_feature(self.params, features)
        return dn.predict_length(self.params, summary).argmax(axis=-1) + 1


def _select(lp: np.ndarray, rngs, mode: str) -> np.ndarray:
    if mode == "greedy":
        return lp.argmax(axis=-1)
    out = np.empty(lp.shape[:-1], dtype=np.int64)
    for b, rng in enumerate(rngs):
        gumbel = -np.log(-np.log(rng.random(lp.shape[1:])))
        out[b] = np.argmax(lp[b] + gumbel, axis=-1)
    return out


def _denoise_group(
    model: Denoiser,
    features: np.ndarray,
    ids: np.ndarray,
    fixed: np.ndarray,
    n_active: int,
    config: SamplerConfig,
    rngs: list[np.random.Generator],
    traces: list[list[dict]] | None,
) -> np.ndarray:
    cfg = model.config
    ids = ids.copy()
    fixed = fixed.copy()
    cand = model.candidate_mask()
    steps = plan_steps(n_active, cfg.T, cfg.step_scale, config)
    s = config.guidance_scale
    for k, step in enumerate(steps):
        lc = model.logits(ids, step.p, features, config.cam) if s != 0.0 else None
        lu = model.logits(ids, step.p, None, config.cam) if s != 1.0 else None
        lp = guided_logprobs(lc, lu, s)
        lp = _log_softmax(np.where(cand, lp, -np.inf))
        sel = _select(lp, rngs, config.selection)
        conf = np.exp(np.take_along_axis(lp, sel[..., None], axis=-1)[..., 0])

        for b, rng in enumerate(rngs):
            free = np.flatnonzero(~fixed[b])
            if config.best_first and step.keep:
                order = free[np.argsort(-conf[b, free], kind="stable")]
                chosen = order[: step.keep]
                ids[b, chosen] = sel[b, chosen]
                fixed[b, chosen] = True
                free = np.flatnonzero(~fixed[b])
            noised = corrupt(
                sel[b],
                step.level_after,
                model.schedule,
                rng,
                mask_id=cfg.mask_id,
                pad_id=cfg.pad_id,
                pad_is_token=model.pad_is_token,
            )
            ids[b, free] = noised[free]
            if traces is not None:
                traces[b].append(
                    {
                        "step": k,
                        "t": step.t,
                        "p": step.p,
                        "fixed": np.flatnonzero(fixed[b]).tolist(),
                        "tokens": ids[b].tolist(),
                    }
                )
    return ids


def _rngs(seed: int, indices) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, int(i)]) for i in indices]


def resolve_lengths(model: Denoiser, features: np.ndarray, config: SamplerConfig, oracle=None) -> np.ndarray:
    n = len(features)
    if config.length == "oracle":
        if oracle is None:
            raise ValueError("oracle length requested but no reference lengths given")
        lengths = np.asarray(oracle, dtype=np.int64)
    elif config.length == "predicted":
        lengths = model.predicted_lengths(features)
    else:
        lengths = np.full(n, int(config.length), dtype=np.int64)
    clipped = np.clip(lengths, 1, model.config.l_max)
    if np.any(clipped != lengths):
        log.warning("clamped %d lengths into [1, %d]", int(np.sum(clipped != lengths)), model.config.l_max)
    return clipped


def sample_captions(
    model: Denoiser,
    features: np.ndarray,
    config: SamplerConfig,
    oracle_lengths=None,
    traces: list[list[dict]] | None = None,
) -> list[list[int]]:
    """Generate one token list per condition (PAD stripped)."""
    features = np.asarray(features)
    lengths = resolve_lengths(model, features, config, oracle_lengths)
    out: list[list[int]] = [[] for _ in range(len(features))]
    mask_id = model.config.mask_id
    for n in sorted(set(lengths.tolist())):
        idx = np.flatnonzero(lengths == n)
        ids0 = np.full((len(idx), n), mask_id, dtype=np.int64)
        fixed0 = np.zeros((len(idx), n), dtype=bool)
        sub_traces = [traces[i] for i in idx] if traces is not None else None
        ids = _denoise_group(model, features[idx], ids0, fixed0, n, config, _rngs(config.seed, idx), sub_traces)
        for row, i in zip(ids, idx):
            out[i] = [int(x) for x in row if x != model.config.pad_id]
    return out


def sample_caption(model: Denoiser, features: np.ndarray, config: SamplerConfig, oracle_length=None):
    """Single-example convenience wrapper around :func:`sample_captions`."""
    oracle = None if oracle_length is None else [oracle_length]
    return sample_captions(model, np.asarray(features)[None], config, oracle)[0]


def infill(
    model: Denoiser,
    features: np.ndarray,
    templates: Sequence[Sequence[int]],
    config: SamplerConfig,
    traces: list[list[dict]] | None = None,
) -> list[list[int]]:
    """Fill MASK holes; non-hole tokens stay fixed throughout."""
    features = np.asarray(features)
    mask_id = model.config.mask_id
    out = [list(map(int, t)) for t in templates]
    keys = [(len(t), sum(int(x) == mask_id for x in t)) for t in templates]
    for key in sorted(set(keys)):
        n, holes = key
        if holes == 0:
            continue
        idx = np.array([i for i, k in enumerate(keys) if k == key])
        ids0 = np.array([templates[i] for i in idx], dtype=np.int64)
        fixed0 = ids0 != mask_id
        sub_traces = [traces[i] for i in idx] if traces is not None else None
        ids = _denoise_group(model, features[idx], ids0, fixed0, holes, config, _rngs(config.seed, idx), sub_traces)
        for row, i in zip(ids, idx):
            out[i] = [int(x) for x in row]
    return out


# ----------------------------------------------------------------- AR side


def decode_ar(model: Denoiser, features: np.ndarray) -> list[list[int]]:
    """Greedy left-to-right decoding; PAD acts as end-of-sequence."""
    cfg = model.config
    features = np.asarray(features)
    B = len(features)
    seq = np.full((B, 1), cfg.mask_id, dtype=np.int64)  # MASK doubles as BOS
    done = np.zeros(B, dtype=bool)
    allowed_out = np.zeros(cfg.vocab_size, dtype=bool)
    allowed_out[: cfg.vocab_size - 2] = True
    allowed_out[cfg.pad_id] = True
    outputs: list[list[int]] = [[] for _ in range(B)]
    for _ in range(cfg.l_max):
        logits = dn.forward_ar(model.params, cfg, seq, features).data[:, -1]
        nxt = np.where(allowed_out, logits, -np.inf).argmax(axis=-1)
        nxt = np.where(done, cfg.pad_id, nxt)
        for b in np.flatnonzero(~done & (nxt != cfg.pad_id)):
            outputs[b].append(int(nxt[b]))
        done |= nxt == cfg.pad_id
        if done.all() or seq.shape[1] == cfg.l_max:
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return outputs


def ar_infill(model: Denoiser, features: np.ndarray, templates: Sequence[Sequence[int]]) -> list[list[int]]:
    """Left-to-right hole filling: each hole sees only its left context.

    Tokens to the right of a hole are forced from the template once the
    decoder reaches them, so they never influence that hole.
    """
    cfg = model.config
    features = np.asarray(features)
    out = [list(map(int, t)) for t in templates]
    text_only = np.zeros(cfg.vocab_size, dtype=bool)
    text_only[: cfg.vocab_size - 2] = True
    for n in sorted({len(t) for t in templates}):
        idx = np.array([i for i, t in enumerate(templates) if len(t) == n])
        filled = np.array([out[i] for i in idx], dtype=np.int64)
        holes = filled == cfg.mask_id
        for pos in range(n):
            rows = np.flatnonzero(holes[:, pos])
            if rows.size == 0:
                continue
            prefix = np.concatenate(
                [np.full((rows.size, 1), cfg.mask_id, dtype=np.int64), filled[rows, :pos]], axis=1
            )
            logits = dn.forward_ar(model.params, cfg, prefix, features[idx[rows]]).data[:, -1]
            filled[rows, pos] = np.where(text_only, logits, -np.inf).argmax(axis=-1)
        for row, i in zip(filled, idx):
            out[i] = row.tolist()
    return out


def write_trace(path, traces: list[list[dict]], vocab=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex, trace in enumerate(traces):
            for rec in trace:
                rec = dict(rec, example=ex)
                if vocab is not None:
                    rec["words"] = [vocab.tokens[i] for i in rec["tokens"]]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_dict(config: SamplerConfig) -> dict:
    return asdict(config)
