"""Absorbing-state corruption chain over text tokens plus a MASK state.

Cumulative marginals from a clean token ``x0`` at level ``t``::

    P(x_t = x0)        = abar_t + bbar_t
    P(x_t = j != x0)   = bbar_t            (each text token j)
    P(x_t = MASK)      = gbar_t

with ``gbar_t = t/T``, ``abar_t = (1 - t/T)(1 - c_u t/T)`` and
``bbar_t = (1 - abar_t - gbar_t) / V_text``. Per-step parameters
``alpha_t = abar_t / abar_{t-1}`` and
``gamma_t = (gbar_t - gbar_{t-1}) / (1 - gbar_{t-1})`` reproduce these
marginals exactly when the one-step matrices are multiplied together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_TOL = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    n_text: int
    c_u: float
    abar: np.ndarray  # (T+1,)
    gbar: np.ndarray
    bbar: np.ndarray
    alpha: np.ndarray  # (T+1,), index 0 unused
    gamma: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        """Per-step uniform-replacement mass per text token."""
        b = (1.0 - self.alpha - self.gamma) / self.n_text
        b[0] = 0.0
        return b

    def cumulative(self, level: float) -> tuple[float, float, float]:
        """``(abar, gbar, bbar)`` at a possibly fractional level in ``[0, T]``."""
        if not 0.0 <= level <= self.T:
            raise ScheduleError(f"level {level} outside [0, {self.T}]")
        if float(level).is_integer():
            t = int(level)
            return float(self.abar[t]), float(self.gbar[t]), float(self.bbar[t])
        u = level / self.T
        abar = (1.0 - u) * (1.0 - self.c_u * u)
        return abar, u, (1.0 - abar - u) / self.n_text

    def rows(self) -> list[tuple[int, float, float, float, float, float]]:
        out = []
        for t in range(self.T + 1):
            a = float(self.alpha[t]) if t else float("nan")
            g = float(self.gamma[t]) if t else float("nan")
            out.append((t, float(self.abar[t]), float(self.gbar[t]), float(self.bbar[t]), a, g))
        return out

    def to_tsv(self) -> str:
        lines = ["t\tabar\tgbar\tbbar\talpha\tgamma"]
        for t, ab, gb, bb, a, g in self.rows():
            lines.append(f"{t}\t{ab:.12g}\t{gb:.12g}\t{bb:.12g}\t{a:.12g}\t{g:.12g}")
        return "\n".join(lines) + "\n"


def build_schedule(T: int = 20, n_text: int = 2, c_u: float = 0.1) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if n_text < 2:
        raise ScheduleError(f"V_text must be >= 2, got {n_text}")
    if not 0.0 <= c_u < 1.0:
        raise ScheduleError(f"c_u must lie in [0, 1), got {c_u}")

    u = np.arange(T + 1, dtype=np.float64) / T
    gbar = u.copy()
    abar = (1.0 - u) * (1.0 - c_u * u)
    gbar[T], abar[T] = 1.0, 0.0
    bbar = (1.0 - abar - gbar) / n_text
    bbar[0] = bbar[T] = 0.0

    alpha = np.zeros(T + 1)
    gamma = np.zeros(T + 1)
    for t in range(1, T + 1):
        alpha[t] = abar[t] / abar[t - 1] if t < T else 0.0
        gamma[t] = (gbar[t] - gbar[t - 1]) / (1.0 - gbar[t - 1]) if t < T else 1.0

    sched = NoiseSchedule(T, n_text, c_u, abar, gbar, bbar, alpha, gamma)
    _validate(sched)
    return sched


def _validate(s: NoiseSchedule) -> None:
    for t in range(s.T + 1):
        vals = {"abar": s.abar[t], "gbar": s.gbar[t], "bbar": s.bbar[t]}
        if t:
            vals |= {"alpha": s.alpha[t], "gamma": s.gamma[t]}
        for name, v in vals.items():
            if not -PROB_TOL <= v <= 1 + PROB_TOL:
                raise ScheduleError(f"{name}_{t} = {v!r} is not a probability")
        total = s.abar[t] + s.gbar[t] + s.n_text * s.bbar[t]
        if abs(total - 1.0) > PROB_TOL:
            raise ScheduleError(f"marginal mass at t={t} sums to {total!r}")
        if t and s.alpha[t] + s.gamma[t] > 1 + PROB_TOL:
            raise ScheduleError(f"alpha_{t} + gamma_{t} = {s.alpha[t] + s.gamma[t]!r} > 1")
    if s.abar[0] != 1.0 or s.gbar[0] != 0.0 or s.gbar[s.T] != 1.0 or s.abar[s.T] != 0.0:
        raise ScheduleError("schedule endpoints must be (1, 0) at t=0 and (0, 1) at t=T")


def marginal(x0_id: int, t: float, schedule: NoiseSchedule) -> np.ndarray:
    """Distribution of ``x_t`` over ``V_text + 1`` states (MASK is the last)."""
    if not 0 <= x0_id < schedule.n_text:
        raise ScheduleError(f"marginals start from a clean text token, got id {x0_id}")
    abar, gbar, bbar = schedule.cumulative(t)
    p = np.full(schedule.n_text + 1, bbar)
    p[x0_id] += abar
    p[-1] = gbar
    return p


def corrupt(
    x0: np.ndarray,
    t: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    *,
    mask_id: int,
    pad_id: int | None = None,
    pad_is_token: bool = False,
) -> np.ndarray:
    """Sample ``x_t ~ q(x_t | x0)`` independently per position.

    PAD positions pass through unchanged unless ``pad_is_token`` is set,
    in which case PAD is corrupted like any text token. One uniform and
    one replacement draw are consumed per position regardless of outcome,
    so RNG usage depends only on the array shape.
    """
    x0 = np.asarray(x0)
    abar, gbar, _ = schedule.cumulative(t)
    u = rng.random(x0.shape)
    repl = rng.integers(0, schedule.n_text, size=x0.shape)
    out = np.where(u < gbar, mask_id, np.where(u < gbar + abar, x0, repl))
    if pad_id is not None and not pad_is_token:
        out = np.where(x0 == pad_id, pad_id, out)
    return out.astype(x0.dtype, copy=False)


def step_matrices(schedule: NoiseSchedule) -> list[np.ndarray]:
    """One-step transition matrices ``Q_t`` (row = from-state), t = 1..T."""
    n = schedule.n_text
    mats = [np.eye(n + 1)]
    beta = schedule.beta
    for t in range(1, schedule.T + 1):
        q = np.zeros((n + 1, n + 1))
        q[:n, :n] = beta[t]
        q[:n, :n] += np.eye(n) * schedule.alpha[t]
        q[:n, n] = schedule.gamma[t]
        q[n, n] = 1.0
        mats.append(q)
    return mats


def compose_check(schedule: NoiseSchedule) -> float:
    """Max |Q_1 ... Q_t - cumulative| over all t and start states."""
    if schedule.n_text > 10:
        raise ScheduleError("compose_check is meant for V_text <= 10")
    n = schedule.n_text
    prod = np.eye(n + 1)
    worst = 0.0
    for t, q in enumerate(step_matrices(schedule)):
        if t:
            prod = prod @ q
        target = np.stack([marginal(i, t, schedule) for i in range(n)] + [np.eye(n + 1)[n]])
        worst = max(worst, float(np.max(np.abs(prod - target))))
    return worst
