"""Dense tensors with tape-based reverse-mode differentiation, plus AdamW.

Every op in this module computes its result eagerly with numpy. When a
:class:`GradTape` is active and at least one input requires a gradient,
the op appends a node ``(output, inputs, vjp)`` to the tape. Because nodes
are appended in execution order the tape is already topologically sorted,
and :meth:`GradTape.backward` simply walks it in reverse.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5

_DEFAULT_DTYPE = [np.dtype(np.float32)]
_ACTIVE_TAPES: list["GradTape"] = []


class ShapeError(ValueError):
    """Operands do not conform for the requested primitive."""


class NumericalError(RuntimeError):
    """A non-finite value showed up where finite values are required."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 / float64)."""
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Records differentiable ops executed while it is the active tape."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | dict[str, Tensor]) -> dict:
        """Gradients of a scalar ``loss`` w.r.t. ``wrt``.

        Returns a dict keyed like ``wrt`` (names for a mapping, the tensors'
        positions otherwise). Tensors the loss does not depend on receive
        zero arrays.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if isinstance(wrt, dict):
            items = list(wrt.items())
        else:
            items = list(enumerate(wrt))

        wanted = {id(t) for _, t in items}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wanted:
                kept[id(node.out)] = g
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        grads.update(kept)
        out = {}
        for key, t in items:
            g = grads.get(id(t))
            out[key] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    sq = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * sq))
    out = Tensor(0.5 * xd * (1.0 + th))

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _record(out, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)
    return _record(out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no recorded dependency on ``x``."""
    return Tensor(x.data)


# -------------------------------------------------------------------- shapes


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = Tensor(np.array(x.data[index]))

    def vjp(g):
        full = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(out, (x,), vjp)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record(out, tuple(tensors), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of shape {table.shape}")
    out = Tensor(table.data[ids])

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), vjp)


# --------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ------------------------------------------------------ normalisation / prob


def softmax(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``allowed`` is False get 0."""
    z = x.data
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)
    out = Tensor(y.astype(x.dtype, copy=False))

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat)

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(out, (x,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of per-position negative log-likelihoods.

    ``weights`` has the shape of ``targets``; with ``weights=None`` this is
    the plain mean over positions.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if weights is None:
        weights = np.full(targets.shape, 1.0 / max(targets.size, 1))
    weights = np.asarray(weights, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(weights != 0, targets, 0)
    nll = -np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    out = Tensor(np.asarray((nll * weights).sum(), dtype=logits.dtype))

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * weights[..., None] * (p - onehot),)

    return _record(out, (logits,), vjp)


# ------------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState) -> None:
    """One bias-corrected AdamW update with decoupled weight decay (in place)."""
    if state.lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {state.lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {params[name].shape} for {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        w = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * w
        w -= (state.lr * update).astype(w.dtype, copy=False)


# -------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    dtype: str
    max_rel_error: float
    per_group: dict[str, float]
    checked_entries: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def finite_difference_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    *,
    h: float = 1e-5,
    max_entries: int | None = 24,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    Tape gradients are taken at the parameters' own precision. The central
    differences are always evaluated in float64 on a float64 copy of the
    parameters, so the same oracle serves both precisions. For each
    parameter tensor at most ``max_entries`` randomly chosen entries are
    probed. The per-group error is ``max|tape - fd| / max|fd|``.
    """
    rng = np.random.default_rng(seed)
    dtype = next(iter(params.values())).dtype if params else default_dtype()
    with precision(dtype):
        with GradTape() as tape:
            loss = loss_fn(params)
        tape_grads = tape.backward(loss, params)

    with precision(np.float64):
        p64 = {k: parameter(v.data.astype(np.float64), name=k) for k, v in params.items()}
        per_group: dict[str, float] = {}
        checked = 0
        for name, p in p64.items():
            flat = p.data.reshape(-1)
            if flat.size == 0:
                per_group[name] = 0.0
                continue
            if max_entries is None or flat.size <= max_entries:
                idx = np.arange(flat.size)
            else:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            fd = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn(p64).data)
                flat[i] = orig - h
                down = float(loss_fn(p64).data)
                flat[i] = orig
                fd[j] = (up - down) / (2 * h)
            tg = tape_grads[name].reshape(-1)[idx].astype(np.float64)
            scale = max(np.max(np.abs(fd)), np.max(np.abs(tg)))
            per_group[name] = 0.0 if scale == 0 else float(np.max(np.abs(tg - fd)) / scale)
            checked += len(idx)
    worst = max(per_group.values(), default=0.0)
    return GradCheckReport(str(np.dtype(dtype)), worst, per_group, checked)
