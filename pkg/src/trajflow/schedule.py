"""Timestep schedules, the Markovian forward process, and its reverse posterior.

The forward process interpolates x_t = (1-t) x_0 + t eps. Consecutive levels
are linked by the transition x_t = alpha_{s,t} x_s + sigma_{s,t} eps with
alpha = (1-t)/(1-s), which preserves the interpolation marginals at every
level. The reverse-time posterior p(x_s | x_t, x_0) is Gaussian with the
closed-form coefficients implemented in :func:`posterior_coeffs`.

Coefficient helpers are written to vectorize over numpy arrays of times so
per-example anchor times work without loops, but the documented contract is
for scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajflow import gradcore as gc
from trajflow.gradcore import Tensor

__all__ = [
    "TimeSchedule",
    "Trajectory",
    "build_schedule",
    "apply_shift",
    "forward_coeffs",
    "forward_transition",
    "sample_trajectory",
    "posterior_coeffs",
    "trajectory_covariance",
]


@dataclass(frozen=True)
class TimeSchedule:
    """Strictly increasing times t_0 < ... < t_T with t_T = 1."""

    times: tuple[float, ...]

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 2:
            raise ValueError("schedule needs at least two times")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"schedule times must be strictly increasing: {ts}")
        if ts[-1] != 1.0:
            raise ValueError(f"schedule must end at 1.0, got {ts[-1]}")
        if not (0.0 <= ts[0] <= 0.05):
            raise ValueError(f"anchor time t_0 must lie in [0, 0.05], got {ts[0]}")

    @property
    def step_count(self) -> int:
        return len(self.times) - 1

    @property
    def t_min(self) -> float:
        return self.times[0]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times, dtype=np.float64)

    def to_text(self) -> str:
        return ",".join(repr(t) for t in self.times)

    @classmethod
    def from_text(cls, text: str) -> "TimeSchedule":
        parts = [p.strip() for p in text.strip().split(",") if p.strip()]
        if not parts:
            raise ValueError("empty schedule text")
        return cls(tuple(float(p) for p in parts))


@dataclass
class Trajectory:
    """States along one noising path.

    ``states`` has shape (T+1, B, D), coarsest last. ``times`` is either a
    shared (T+1,) vector or per-example (B, T+1) when anchors differ across
    the batch.
    """

    states: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.states.ndim != 3:
            raise ValueError(f"states must be (T+1, B, D), got {self.states.shape}")
        levels = self.states.shape[0]
        if self.times.ndim == 1:
            if self.times.shape[0] != levels:
                raise ValueError("times length does not match state levels")
        elif self.times.ndim == 2:
            if self.times.shape != (self.states.shape[1], levels):
                raise ValueError("per-example times must be (B, T+1)")
        else:
            raise ValueError("times must be 1-d or 2-d")

    @property
    def level_count(self) -> int:
        return self.states.shape[0]

    def time_at(self, k: int) -> np.ndarray:
        """Time of level k, scalar array or per-example (B,)."""
        if self.times.ndim == 1:
            return self.times[k]
        return self.times[:, k]


def build_schedule(step_count: int, t_min: float) -> TimeSchedule:
    """Uniform grid (t_min, 1/T, 2/T, ..., 1) with the first entry replaced.

    Raises ValueError if t_min is outside [0, 0.05] or collides with 1/T.
    """
    if int(step_count) != step_count or step_count < 1:
        raise ValueError(f"step_count must be a positive integer, got {step_count}")
    step_count = int(step_count)
    t_min = float(t_min)
    if not (0.0 <= t_min <= 0.05):
        raise ValueError(f"t_min must lie in [0, 0.05], got {t_min}")
    if t_min >= 1.0 / step_count:
        raise ValueError(
            f"t_min={t_min} must be below the first grid time {1.0 / step_count}"
        )
    times = [t_min] + [k / step_count for k in range(1, step_count + 1)]
    return TimeSchedule(tuple(times))


def shift_mu(seq_len: int) -> float:
    """Resolution-dependent shift strength, 0.5 at 256 up to 1.15 at 4096."""
    return 0.5 + 0.65 * (seq_len - 256) / (4096 - 256)


def apply_shift(schedule: TimeSchedule, seq_len: int) -> TimeSchedule:
    """Warps interior times toward 1 for longer sequences.

    Each interior time u becomes e^mu / (e^mu + 1/u - 1); the anchor t_min
    and the endpoint 1 are preserved.
    """
    if int(seq_len) != seq_len or seq_len < 1:
        raise ValueError(f"seq_len must be a positive integer, got {seq_len}")
    mu = shift_mu(int(seq_len))
    emu = float(np.exp(mu))
    times = list(schedule.times)
    for k in range(1, len(times) - 1):
        u = times[k]
        times[k] = emu / (emu + 1.0 / u - 1.0)
    return TimeSchedule(tuple(times))


def forward_coeffs(s, t):
    """Transition coefficients (alpha, sigma) for jumping s -> t, s < t.

    Vectorizes over array-valued s/t of matching shape.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s < 0.0) or np.any(t > 1.0):
        raise ValueError("times must satisfy 0 <= s < t <= 1")
    if np.any(s >= t):
        raise ValueError(f"need s < t elementwise, got s={s}, t={t}")
    alpha = (1.0 - t) / (1.0 - s)
    sigma = np.sqrt(np.maximum(t * t - alpha * alpha * s * s, 0.0))
    if s.ndim == 0 and t.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def _align(coef, shape: tuple[int, ...]) -> np.ndarray:
    """Reshapes a scalar or leading-axis coefficient to broadcast over shape."""
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (len(shape) - coef.ndim))


def forward_transition(x_s, s, t, noise):
    """One forward noising step alpha * x_s + sigma * noise.

    Accepts numpy arrays or grad-tracked tensors; s and t may be scalars or
    per-example (B,) arrays aligned with the leading axis of x_s.
    """
    alpha, sigma = forward_coeffs(s, t)
    if isinstance(x_s, Tensor) or isinstance(noise, Tensor):
        xs = x_s if isinstance(x_s, Tensor) else Tensor(x_s)
        eps = noise if isinstance(noise, Tensor) else Tensor(noise)
        if xs.shape != eps.shape:
            raise ValueError(f"noise shape {eps.shape} != state shape {xs.shape}")
        a = Tensor(np.broadcast_to(_align(alpha, xs.shape), xs.shape).copy())
        b = Tensor(np.broadcast_to(_align(sigma, xs.shape), xs.shape).copy())
        return gc.add(gc.mul(a, xs), gc.mul(b, eps))
    x_s = np.asarray(x_s, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x_s.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} != state shape {x_s.shape}")
    return _align(alpha, x_s.shape) * x_s + _align(sigma, x_s.shape) * noise


def sample_trajectory(x0, schedule: TimeSchedule, rng: np.random.Generator,
                      t0=None) -> Trajectory:
    """Noises a clean batch along the schedule, coarsest level last.

    The anchor level is the interpolation marginal (1-t_0) x_0 + t_0 eps;
    later levels follow the Markov transition, which keeps every level on
    its marginal. ``t0`` optionally overrides the anchor time per example
    with a (B,) array (values below the first interior time).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    times = schedule.as_array()
    batch = x0.shape[0]
    if t0 is None:
        t0_arr = np.full(batch, times[0])
        out_times = times
    else:
        t0_arr = np.asarray(t0, dtype=np.float64).reshape(batch)
        if np.any(t0_arr >= times[1]) or np.any(t0_arr < 0.0):
            raise ValueError("per-example anchor times must lie in [0, t_1)")
        out_times = np.concatenate(
            [t0_arr[:, None], np.broadcast_to(times[1:], (batch, len(times) - 1))],
            axis=1,
        )
    states = np.empty((len(times), batch, x0.shape[1]), dtype=np.float64)
    eps0 = rng.standard_normal(x0.shape)
    states[0] = (1.0 - t0_arr)[:, None] * x0 + t0_arr[:, None] * eps0
    prev_t = t0_arr
    for k in range(1, len(times)):
        eps = rng.standard_normal(x0.shape)
        states[k] = forward_transition(states[k - 1], prev_t, times[k], eps)
        prev_t = np.full(batch, times[k])
    return Trajectory(states=states, times=out_times)


def posterior_coeffs(t, s):
    """Coefficients (a, b, c) of p(x_s | x_t, x_0) = N(a x_t + b x_0, c^2).

    Note the argument order: t is the noisier (later) time. s=0 returns the
    continuity limit (0, 1, 0) since x_0 is deterministic given x_0.
    Vectorizes over matching-shape arrays.
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(t <= 0.0):
        raise ValueError("posterior undefined at t = 0")
    if np.any(s < 0.0) or np.any(s >= t) or np.any(t > 1.0):
        raise ValueError(f"need 0 <= s < t <= 1, got t={t}, s={s}")
    one_m_s = 1.0 - s
    a = s * s * (1.0 - t) / (t * t * one_m_s)
    b = (t - s) * (t + s - 2.0 * t * s) / (t * t * one_m_s)
    c = np.sqrt(s * s * (t - s) * (t + s - 2.0 * t * s)) / (t * one_m_s)
    if t.ndim == 0 and s.ndim == 0:
        return float(a), float(b), float(c)
    return a, b, c


def trajectory_covariance(schedule_or_times) -> np.ndarray:
    """Per-coordinate covariance of trajectory levels given the clean point.

    Entry (i, j) is min(t_i,t_j)^2 (1-max) / (1-min); the diagonal is t^2
    exactly, which also resolves the 0/0 at t = 1.
    """
    if isinstance(schedule_or_times, TimeSchedule):
        times = schedule_or_times.as_array()
    else:
        times = np.asarray(schedule_or_times, dtype=np.float64)
    lo = np.minimum.outer(times, times)
    hi = np.maximum.outer(times, times)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_matrix = lo * lo * (1.0 - hi) / (1.0 - lo)
    np.fill_diagonal(s_matrix, times * times)
    s_matrix = np.nan_to_num(s_matrix, nan=0.0, posinf=0.0, neginf=0.0)
    np.fill_diagonal(s_matrix, times * times)
    return s_matrix
