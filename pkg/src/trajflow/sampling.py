"""Few-step ancestral sampling, guidance, and trajectory denoising.

Sampling inverts the predictor coupling one level at a time in u-space,
then maps every level back to data space through the transporter inverse.
Score denoising treats a whole generated trajectory as one point, walks the
exact-likelihood gradient, couples levels through the analytic trajectory
covariance, and reads the corrected clean estimate at the anchor level. A
small learned denoiser distills that correction into a single forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajflow import gradcore as gc
from trajflow.gradcore import Tape, Tensor, grad
from trajflow.flow import (
    CouplingParams,
    Linear,
    Module,
    affine_inverse,
    build_conditioner,
    ntm_nll,
    transporter_inverse,
)
from trajflow.schedule import TimeSchedule, Trajectory, trajectory_covariance

__all__ = [
    "SampleRequest",
    "sample",
    "cfg_combine",
    "score_denoise",
    "Denoiser",
    "denoiser_train_step",
    "denoiser_apply",
]


@dataclass
class SampleRequest:
    """What to generate: count, condition, guidance, steps, determinism."""

    n: int
    step_count: int
    y: object = None
    w: float = 0.0
    seed: int = 0
    denoise: str = "none"  # none | score | learned

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one sample")
        if self.w < 0.0:
            raise ValueError("guidance scale must be nonnegative")
        if self.denoise not in ("none", "score", "learned"):
            raise ValueError(f"unknown denoise mode {self.denoise!r}")


def cfg_combine(mu_c, sigma_c, mu_u, sigma_u, w: float) -> CouplingParams:
    """Guidance on Gaussian coupling parameters, in closed form.

    s = clip((sigma_c/sigma_u)^2, 0, 1); the denominator 1 + w - w*s stays
    >= 1, so the combination is always defined. w = 0 returns the
    conditional parameters unchanged.
    """
    as_t = lambda v: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    mu_c, sigma_c = as_t(mu_c), as_t(sigma_c)
    mu_u, sigma_u = as_t(mu_u), as_t(sigma_u)
    ratio = (sigma_c / sigma_u) * (sigma_c / sigma_u)
    s = gc.clamp(ratio, 0.0, 1.0)
    denom = 1.0 + w - s * w
    sigma_eff = sigma_c / gc.sqrt(denom)
    mu_eff = (mu_c * (1.0 + w) - s * mu_u * w) / denom
    return CouplingParams(mu=mu_eff, sigma=sigma_eff)


def _level_to_x(model, u: np.ndarray, t, steps: int) -> np.ndarray:
    if not model.transports(t):
        return u
    batch = u.shape[0]
    u3 = u.reshape(batch, model.positions, model.channels)
    x3 = transporter_inverse(u3, t, steps, model.blocks)
    return x3.reshape(batch, u.shape[1])


def sample(model, req: SampleRequest, rng: np.random.Generator | None = None,
           denoiser: "Denoiser | None" = None):
    """Ancestral generation; returns (final estimate, x-space trajectory).

    Draws u_T from the standard normal, inverts the predictor coupling for
    each step with a fresh z, and finally maps every level to data space.
    With w = 0 no unconditional evaluation happens at all. The denoise mode
    picks what the final estimate is: the raw anchor level, the
    score-denoised anchor, or the learned denoiser applied to u_{t_0}.
    """
    if rng is None:
        rng = np.random.default_rng(req.seed)
    schedule = model.schedule_for(req.step_count)
    times = schedule.as_array()
    steps = schedule.step_count
    dim = model.config.dim
    n = req.n
    guided = req.w > 0.0 and req.y is not None

    u = rng.standard_normal((n, dim))
    u_levels = [u]
    for k in range(steps, 0, -1):
        t_k, s_k = times[k], times[k - 1]
        u_t = Tensor(u)
        params = model.predictor.params(u_t, t_k, s_k, steps, req.y)
        if guided:
            params_u = model.predictor.params(u_t, t_k, s_k, steps, None)
            params = cfg_combine(params.mu, params.sigma,
                                 params_u.mu, params_u.sigma, req.w)
        z = rng.standard_normal((n, dim))
        u = affine_inverse(Tensor(z), params).data
        u_levels.append(u)
    u_levels = u_levels[::-1]  # index k now matches level t_k

    states = np.empty((steps + 1, n, dim))
    for k in range(steps + 1):
        states[k] = _level_to_x(model, u_levels[k], times[k], steps)
    trajectory = Trajectory(states=states, times=times)

    if req.denoise == "none":
        return states[0].copy(), trajectory
    if req.denoise == "score":
        denoised = score_denoise(trajectory, req.y, model, schedule)
        return denoised.states[0].copy(), trajectory
    if denoiser is None:
        raise ValueError("learned denoise mode needs a denoiser instance")
    return denoiser_apply(u_levels[0], req.y, denoiser), trajectory


def score_denoise(trajectory: Trajectory, y, model, schedule: TimeSchedule,
                  clip_percentile: float | None = 99.0,
                  mode: str = "joint") -> Trajectory:
    """Covariance-weighted gradient correction of a whole trajectory.

    Computes g = grad of the exact trajectory NLL with respect to every
    level, optionally clamps |g| at a per-trajectory percentile, applies
    the level-coupling matrix S per coordinate (or its diagonal in
    "diagonal" mode), and rescales each level by 1/(1 - t). The top level
    carries pure noise and is excluded from the output; the anchor level of
    the result is the denoised sample.
    """
    if mode not in ("joint", "diagonal"):
        raise ValueError(f"unknown covariance mode {mode!r}")
    times = schedule.as_array()
    if trajectory.times.ndim != 1 or not np.array_equal(trajectory.times, times):
        raise ValueError("trajectory times do not match the schedule")
    levels, batch, dim = trajectory.states.shape
    if levels != len(times):
        raise ValueError("trajectory level count does not match the schedule")

    leaves = [Tensor(trajectory.states[k].copy(), requires_grad=True)
              for k in range(levels)]
    with Tape() as tape:
        nll, _ = ntm_nll(trajectory, y, model, reduce="sum", leaves=leaves)
        gs = grad(nll, leaves, tape=tape)
    g = np.stack([t.data for t in gs], axis=0)  # (levels, batch, dim)

    if clip_percentile is not None:
        # per-trajectory threshold over all levels and coordinates
        thr = np.percentile(np.abs(g), clip_percentile, axis=(0, 2))
        g = np.clip(g, -thr[None, :, None], thr[None, :, None])

    s_matrix = trajectory_covariance(times)
    if mode == "diagonal":
        corr = np.diag(s_matrix)[:, None, None] * g
    else:
        corr = np.einsum("kj,jbd->kbd", s_matrix, g)

    keep = levels - 1  # drop the t = 1 level
    scale = 1.0 / (1.0 - times[:keep])
    denoised = (trajectory.states[:keep] - corr[:keep]) * scale[:, None, None]
    return Trajectory(states=denoised, times=times[:keep])


# -- learned denoiser ----------------------------------------------------------


class Denoiser(Module):
    """Position-wise MLP with one global mixing layer, copy-through at init.

    Maps the cleanest-level latent u_{t_0} straight to a clean-data
    estimate. The residual head starts at zero, so an untrained denoiser is
    the identity on its input.
    """

    def __init__(self, positions: int, channels: int, rng: np.random.Generator,
                 width: int = 64, conditioning: str = "none", n_classes: int = 0,
                 cond_dim: int = 2, label_emb: int = 16):
        super().__init__()
        self.positions = positions
        self.channels = channels
        self.width = width
        self.conditioning = conditioning
        self.n_classes = n_classes
        self.cond_dim = cond_dim
        self.label_emb = label_emb
        self.conditioner = self.add_child(
            "conditioner",
            build_conditioner(conditioning, rng, n_classes=n_classes,
                              cond_dim=cond_dim, emb=label_emb),
        )
        self.inp = self.add_child("inp", Linear(channels, width, rng))
        if self.conditioner.dim > 0:
            self.cond_proj = self.add_child(
                "cond_proj", Linear(self.conditioner.dim, width, rng)
            )
        self.mix = self.add_child(
            "mix", Linear(positions * width, positions * width, rng)
        )
        self.ff = self.add_child("ff", Linear(width, width, rng))
        self.head = self.add_child("head", Linear(width, channels, rng, zero_init=True))

    def forward(self, u: Tensor, y) -> Tensor:
        batch, dim = u.shape
        if dim != self.positions * self.channels:
            raise ValueError(f"input dim {dim} != positions*channels")
        u3 = u.reshape((batch, self.positions, self.channels))
        flat = u3.reshape((batch * self.positions, self.channels))
        h = self.inp(flat)
        if self.conditioner.dim > 0:
            emb = self.cond_proj(self.conditioner.embed(y, batch))
            emb3 = gc.broadcast_to(
                emb.reshape((batch, 1, self.width)),
                (batch, self.positions, self.width),
            )
            h = h.reshape((batch, self.positions, self.width)) + emb3
            h = h.reshape((batch * self.positions, self.width))
        h = gc.gelu(h)
        mixed = gc.gelu(self.mix(h.reshape((batch, self.positions * self.width))))
        h = gc.gelu(self.ff(mixed.reshape((batch * self.positions, self.width))))
        res = self.head(h).reshape((batch, self.positions, self.channels))
        return u + res.reshape((batch, dim))


def denoiser_train_step(trajectories: Trajectory, y, model, denoiser: Denoiser,
                        opt, clip_percentile: float | None = 99.0,
                        mode: str = "joint") -> float:
    """One distillation step toward the score-denoised anchor estimate.

    Targets come from score_denoise on real-data trajectories with the main
    model frozen; the regression input is the model's u-space encoding of
    the anchor level.
    """
    schedule = TimeSchedule(tuple(np.asarray(trajectories.times, dtype=np.float64)))
    target = score_denoise(trajectories, y, model, schedule,
                           clip_percentile=clip_percentile, mode=mode).states[0]
    t0 = trajectories.time_at(0)
    steps = trajectories.level_count - 1
    if model.transports(t0):
        u_t0 = model.transport(trajectories.states[0], t0, steps)[0].data
    else:
        u_t0 = trajectories.states[0]
    with Tape() as tape:
        out = denoiser.forward(Tensor(u_t0), y)
        loss = gc.tmean((out - Tensor(target)) ** 2)
        gs = grad(loss, denoiser.parameters(), tape=tape)
    opt.step([g.data for g in gs])
    return float(loss.data)


def denoiser_apply(u_t0, y, denoiser: Denoiser) -> np.ndarray:
    """Single forward pass, no gradients; returns a numpy clean estimate."""
    u = u_t0 if isinstance(u_t0, Tensor) else Tensor(np.asarray(u_t0, dtype=np.float64))
    return denoiser.forward(u, y).data.copy()
