"""Transformer denoiser ``p(x0 | x_t, y)`` with a length head.

Each layer is pre-norm::

    h += SelfAttn(AdaLN(h, t))         # CAM or full/causal mask
    h += CrossAttn(LN(h), condition)   # 10 condition slots, never masked
    h += FFN(AdaLN(h, t))

AdaLN scale/shift come from a per-layer linear map of ``silu(emb(t))``
where ``emb`` is the sinusoidal embedding of the effective timestep ``p``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import NumericalError, Tensor
from .scenegen import FEATURE_DIM, N_COND_TOKENS
from .textcodec import L_MAX

TIMESTEP_MODES = ("sinusoidal", "learned", "none")


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    d_ff: int = 512
    l_max: int = L_MAX
    T: int = 20
    step_scale: float = 8000.0
    n_cond: int = N_COND_TOKENS
    feature_dim: int = FEATURE_DIM
    timestep_embedding: str = "sinusoidal"
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal embedding")
        if self.step_scale <= 0:
            raise ValueError("step_scale must be positive")
        if self.timestep_embedding not in TIMESTEP_MODES:
            raise ValueError(f"timestep_embedding must be one of {TIMESTEP_MODES}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must include at least one word plus MASK and PAD")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict[str, Tensor]


def init_params(config: DenoiserConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d, V, std = config.d_model, config.vocab_size, config.init_std
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "tok_emb": ((V, d), "normal"),
        "pos_emb": ((config.l_max, d), "normal"),
        "cond_w": ((config.feature_dim, d), "normal"),
        "cond_b": ((d,), "zeros"),
        "cond_slot": ((config.n_cond, d), "normal"),
        "null_cond": ((config.n_cond, d), "normal"),
    }
    if config.timestep_embedding == "learned":
        shapes["t_table"] = ((config.T + 1, d), "normal")
    for i in range(config.layers):
        shapes |= {
            f"L{i}.ada_w": ((d, 4 * d), "normal"),
            f"L{i}.ada_b": ((4 * d,), "zeros"),
            f"L{i}.qkv_w": ((d, 3 * d), "normal"),
            f"L{i}.qkv_b": ((3 * d,), "zeros"),
            f"L{i}.o_w": ((d, d), "normal"),
            f"L{i}.o_b": ((d,), "zeros"),
            f"L{i}.xln_g": ((d,), "ones"),
            f"L{i}.xln_b": ((d,), "zeros"),
            f"L{i}.xq_w": ((d, d), "normal"),
            f"L{i}.xq_b": ((d,), "zeros"),
            f"L{i}.xkv_w": ((d, 2 * d), "normal"),
            f"L{i}.xkv_b": ((2 * d,), "zeros"),
            f"L{i}.xo_w": ((d, d), "normal"),
            f"L{i}.xo_b": ((d,), "zeros"),
            f"L{i}.ff1_w": ((d, config.d_ff), "normal"),
            f"L{i}.ff1_b": ((config.d_ff,), "zeros"),
            f"L{i}.ff2_w": ((config.d_ff, d), "normal"),
            f"L{i}.ff2_b": ((d,), "zeros"),
        }
    shapes |= {
        "out_ln_g": ((d,), "ones"),
        "out_ln_b": ((d,), "zeros"),
        "out_w": ((d, V), "normal"),
        "out_b": ((V,), "zeros"),
        "len1_w": ((d, d), "normal"),
        "len1_b": ((d,), "zeros"),
        "len2_w": ((d, config.l_max), "normal"),
        "len2_b": ((config.l_max,), "zeros"),
    }
    params = {}
    for name, (shape, kind) in shapes.items():
        if kind == "normal":
            arr = rng.normal(0.0, std, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = nx.parameter(arr, name=name)
    return params


def count_params(params: Params) -> int:
    return sum(p.data.size for p in params.values())


# --------------------------------------------------------------- timesteps


def timestep_embedding(p, d_model: int) -> np.ndarray:
    """Sinusoidal embedding of effective timestep(s) ``p``.

    Component ``i`` is ``sin(p / 10000**(2i/d))`` for ``i < d/2`` and
    ``cos(p / 10000**(2i/d))`` otherwise; note the cosine half keeps the
    running index ``i`` in its exponent.
    """
    p = np.asarray(p, dtype=np.float64)
    i = np.arange(d_model)
    angle = p[..., None] / np.power(10000.0, 2.0 * i / d_model)
    return np.where(i < d_model // 2, np.sin(angle), np.cos(angle))


def effective_timestep(t, T: int, step_scale: float) -> np.ndarray:
    return np.asarray(t, dtype=np.float64) * step_scale / T


# -------------------------------------------------------------- attention


def build_cam_mask(
    mask_flags: np.ndarray,
    pad_flags: np.ndarray | None = None,
    *,
    t2m: bool = True,
    m2m: bool = True,
) -> np.ndarray:
    """Boolean ``allowed[..., q, k]`` for the concentrated attention mask.

    ``t2m`` blocks text queries from MASK keys, ``m2m`` blocks MASK queries
    from other MASK keys. Every non-PAD position may attend to itself and
    PAD positions attend only to themselves.
    """
    mask_flags = np.asarray(mask_flags, dtype=bool)
    if pad_flags is None:
        pad_flags = np.zeros_like(mask_flags)
    pad_flags = np.asarray(pad_flags, dtype=bool)
    L = mask_flags.shape[-1]
    q_mask = mask_flags[..., :, None]
    k_mask = mask_flags[..., None, :]
    allowed = np.ones(mask_flags.shape[:-1] + (L, L), dtype=bool)
    if t2m:
        allowed &= ~(~q_mask & k_mask)
    if m2m:
        allowed &= ~(q_mask & k_mask)
    allowed &= ~pad_flags[..., :, None] & ~pad_flags[..., None, :]
    allowed |= np.eye(L, dtype=bool)
    return allowed


def full_mask(pad_flags: np.ndarray) -> np.ndarray:
    return build_cam_mask(np.zeros_like(pad_flags, dtype=bool), pad_flags, t2m=False, m2m=False)


def causal_mask(pad_flags: np.ndarray) -> np.ndarray:
    L = pad_flags.shape[-1]
    return full_mask(pad_flags) & np.tril(np.ones((L, L), dtype=bool))


CAM_RULES = {"both": (True, True), "t2m": (True, False), "m2m": (False, True), "off": (False, False)}


def self_attention_mask(
    ids: np.ndarray, config: DenoiserConfig, cam: str = "both", pad_is_token: bool = False
) -> np.ndarray:
    ids = np.asarray(ids)
    t2m, m2m = CAM_RULES[cam]
    pad = np.zeros(ids.shape, dtype=bool) if pad_is_token else ids == config.pad_id
    return build_cam_mask(ids == config.mask_id, pad, t2m=t2m, m2m=m2m)


def _heads_split(x: Tensor, H: int) -> Tensor:
    B, L, d = x.shape
    return nx.transpose(nx.reshape(x, (B, L, H, d // H)), (0, 2, 1, 3))


def _heads_merge(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray | None, H: int) -> Tensor:
    qh, kh, vh = _heads_split(q, H), _heads_split(k, H), _heads_split(v, H)
    scale = 1.0 / np.sqrt(q.shape[-1] // H)
    scores = nx.matmul(qh, nx.transpose(kh, (0, 1, 3, 2))) * scale
    att = nx.softmax(scores, None if allowed is None else allowed[:, None, :, :])
    return _heads_merge(nx.matmul(att, vh))


def _linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return nx.matmul(x, params[prefix + "_w"]) + params[prefix + "_b"]


# ---------------------------------------------------------------- forward


def condition_tokens(
    params: Params, features: np.ndarray | None, batch: int, null_mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor | None]:
    """Projected condition slots ``(B, n_cond, d)`` and the summary slot.

    ``features=None`` substitutes the learned null embedding everywhere;
    ``null_mask`` substitutes it for selected examples only.
    """
    f = params["null_cond"]
    if features is None:
        zeros = np.zeros((batch,) + f.shape, dtype=f.dtype)
        return nx.add(zeros, f), None
    feats = nx.as_tensor(np.asarray(features, dtype=f.dtype))
    proj = nx.matmul(feats, params["cond_w"]) + params["cond_b"] + params["cond_slot"]
    summary = proj[:, -1, :]
    if null_mask is not None and np.any(null_mask):
        m = np.asarray(null_mask, dtype=f.dtype)[:, None, None]
        proj = proj * (1.0 - m) + f * m
    return proj, summary


def _time_features(params: Params, config: DenoiserConfig, p: np.ndarray) -> Tensor:
    dtype = params["tok_emb"].dtype
    if config.timestep_embedding == "learned":
        idx = np.clip(np.rint(p * config.T / config.step_scale), 0, config.T).astype(np.int64)
        return nx.silu(nx.embedding(params["t_table"], idx))
    if config.timestep_embedding == "none":
        p = np.zeros_like(p)
    emb = timestep_embedding(p, config.d_model)
    return nx.as_tensor((emb / (1.0 + np.exp(-emb))).astype(dtype))


def forward(
    params: Params,
    config: DenoiserConfig,
    ids: np.ndarray,
    p,
    features: np.ndarray | None,
    allowed: np.ndarray,
    null_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Logits ``(B, L, V)`` and the condition summary ``(B, d)``.

    ``p`` is the effective timestep per example (scalar broadcasts).
    The summary is ``None`` when ``features`` is None.
    """
    ids = np.asarray(ids)
    B, L = ids.shape
    if L > config.l_max:
        raise nx.ShapeError(f"sequence length {L} exceeds l_max={config.l_max}")
    if allowed.shape != (B, L, L):
        raise nx.ShapeError(f"attention mask {allowed.shape} vs sequence {(B, L, L)}")
    d, H = config.d_model, config.heads
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), (B,))

    h = nx.embedding(params["tok_emb"], ids) + params["pos_emb"][:L]
    ctx, summary = condition_tokens(params, features, B, null_mask)
    tfeat = _time_features(params, config, p)

    for i in range(config.layers):
        pre = f"L{i}."
        ada = nx.reshape(_linear(tfeat, params, pre + "ada"), (B, 1, 4 * d))
        s1, b1, s2, b2 = (ada[:, :, j * d : (j + 1) * d] for j in range(4))

        a = nx.layer_norm(h) * (s1 + 1.0) + b1
        qkv = _linear(a, params, pre + "qkv")
        q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]
        h = h + _linear(_attend(q, k, v, allowed, H), params, pre + "o")

        c = nx.layer_norm(h) * params[pre + "xln_g"] + params[pre + "xln_b"]
        xq = _linear(c, params, pre + "xq")
        xkv = _linear(ctx, params, pre + "xkv")
        h = h + _linear(_attend(xq, xkv[:, :, :d], xkv[:, :, d:], None, H), params, pre + "xo")

        a = nx.layer_norm(h) * (s2 + 1.0) + b2
        h = h + _linear(nx.gelu(_linear(a, params, pre + "ff1")), params, pre + "ff2")

        if not np.all(np.isfinite(h.data)):
            raise NumericalError(f"non-finite activation after layer {i}")

    h = nx.layer_norm(h) * params["out_ln_g"] + params["out_ln_b"]
    return _linear(h, params, "out"), summary


def length_logits(params: Params, summary: Tensor | np.ndarray) -> Tensor:
    """Length-class logits; class ``k`` means length ``k + 1``.

    The summary is detached so this head never sends gradient into the
    condition projection, then layer-normalised so the head sees it at
    unit scale however small the projection weights are.
    """
    x = nx.stop_gradient(summary) if isinstance(summary, Tensor) else nx.as_tensor(summary)
    return _linear(nx.gelu(_linear(nx.layer_norm(x), params, "len1")), params, "len2")


def predict_length(params: Params, summary) -> np.ndarray:
    """Probability over lengths ``1..l_max`` per example."""
    return nx.softmax(length_logits(params, summary)).data


def summary_feature(params: Params, features: np.ndarray) -> Tensor:
    feats = np.asarray(features, dtype=params["cond_w"].dtype)
    last = nx.as_tensor(feats[:, -1, :])
    return nx.matmul(last, params["cond_w"]) + params["cond_b"] + params["cond_slot"][-1]


def forward_ar(
    params: Params,
    config: DenoiserConfig,
    ids: np.ndarray,
    features: np.ndarray | None,
) -> Tensor:
    """Next-token logits under a causal mask with the timestep pinned at 0."""
    ids = np.asarray(ids)
    allowed = causal_mask(ids == config.pad_id)
    logits, _ = forward(params, config, ids, 0.0, features, allowed)
    return logits
