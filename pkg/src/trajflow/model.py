"""Model assembly and training loops.

Covers four paths:

* toy flow-matching pretraining (velocity regression + Euler sampling),
* from-scratch trajectory-likelihood training, end-to-end or pair-wise,
* finetune initialization that reinterprets the pretrained velocity as a
  Gaussian posterior predictor (identity transporter, analytic posterior
  coefficients, zero-initialized residual scale head), with the
  mean-alignment auxiliary loss against a frozen copy,
* the Gaussian-posterior ancestral sampler of the pretrained model, kept
  as an independent mirror of the finetune-initialized sampler.

All randomness flows through explicit numpy generators in a fixed draw
order, so a seed pins every parameter and every training step bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from trajflow import gradcore as gc
from trajflow.gradcore import Tape, Tensor, grad
from trajflow.flow import (
    CouplingParams,
    Linear,
    MlpPredictor,
    Module,
    TransporterBlock,
    AttentionTransporterBlock,
    build_conditioner,
    ntm_nll,
    factor_nll,
    sinusoidal_embedding,
    transporter_forward,
    RAW_CLAMP,
)
from trajflow.schedule import (
    TimeSchedule,
    Trajectory,
    build_schedule,
    forward_transition,
    posterior_coeffs,
    sample_trajectory,
)

__all__ = [
    "TrainingDiverged",
    "TrainConfig",
    "StepMetrics",
    "AdamW",
    "FmConfig",
    "FlowMatchModel",
    "fm_train_step",
    "fm_sample",
    "fm_posterior_sample",
    "NtmConfig",
    "NtmModel",
    "FinetunePredictor",
    "finetune_init",
    "endtoend_loss",
    "pairwise_loss",
    "aux_loss",
    "lambda_at",
    "train_step",
]

MIN_POSTERIOR_STD = 1e-9


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# -- configs ------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimizer and loop settings shared by all training paths."""

    mode: str = "end-to-end"  # or "pair-wise"
    lr: float = 3e-4
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 1e-4
    warmup: int = 200
    batch_size: int = 256
    cfg_dropout: float = 0.1
    lam0: float = 0.0
    iters: int = 2000
    seed: int = 0
    t_set: tuple[int, ...] | None = None  # overrides the model's allowed set
    t_min_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in ("end-to-end", "pair-wise"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not (0.0 <= self.cfg_dropout <= 1.0):
            raise ValueError("cfg_dropout must be a probability")
        if self.lam0 < 0.0:
            raise ValueError("aux weight must be nonnegative")


@dataclass
class StepMetrics:
    step: int
    nll: float
    aux: float
    total: float
    lam: float
    grad_norm: float
    wall_ms: float
    mu_drift: float | None = None


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay and warmup+cosine rate."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.95),
                 weight_decay: float = 1e-4, warmup: int = 200,
                 total_steps: int = 10_000, lr_min: float = 0.0,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.lr_min = lr_min
        self.betas = betas
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.total_steps = max(total_steps, 1)
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params: list[Tensor], cfg: TrainConfig) -> "AdamW":
        return cls(params, lr=cfg.lr, betas=cfg.betas,
                   weight_decay=cfg.weight_decay, warmup=cfg.warmup,
                   total_steps=cfg.iters, lr_min=cfg.lr_min)

    def lr_at(self, step: int) -> float:
        if self.warmup > 0 and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.total_steps - self.warmup, 1)
        frac = min(max(step - self.warmup, 0) / span, 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + np.cos(np.pi * frac))

    def step(self, grads: list[np.ndarray]) -> float:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        lr = self.lr_at(self.t)
        b1, b2 = self.betas
        self.t += 1
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)
        return lr


def grad_global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


# -- flow matching -------------------------------------------------------------


@dataclass
class FmConfig:
    dim: int = 2
    width: int = 64
    depth: int = 3
    time_emb: int = 16
    conditioning: str = "none"
    n_classes: int = 0
    cond_dim: int = 2
    label_emb: int = 16
    seed: int = 0


class FlowMatchModel(Module):
    """Velocity MLP v(x_t, t, y); the head is zero-initialized."""

    def __init__(self, config: FmConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.conditioner = self.add_child(
            "conditioner",
            build_conditioner(config.conditioning, rng,
                              n_classes=config.n_classes,
                              cond_dim=config.cond_dim, emb=config.label_emb),
        )
        in_dim = config.dim + config.time_emb + self.conditioner.dim
        self.layers = []
        prev = in_dim
        for i in range(config.depth):
            layer = self.add_child(f"layer{i}", Linear(prev, config.width, rng))
            self.layers.append(layer)
            prev = config.width
        self.head = self.add_child("head", Linear(prev, config.dim, rng, zero_init=True))

    @property
    def null_index(self) -> int | None:
        return getattr(self.conditioner, "null_index", None)

    def velocity_and_hidden(self, x, t, y):
        """Returns (velocity, last hidden features), both tensors."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        batch = x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        feats = [x, Tensor(sinusoidal_embedding(t_arr, self.config.time_emb))]
        emb_y = self.conditioner.embed(y, batch)
        if emb_y is not None:
            feats.append(emb_y)
        h = gc.concat(feats, axis=1)
        for layer in self.layers:
            h = gc.gelu(layer(h))
        return self.head(h), h

    def velocity(self, x, t, y) -> Tensor:
        return self.velocity_and_hidden(x, t, y)[0]

    def clone(self) -> "FlowMatchModel":
        copy = FlowMatchModel(replace(self.config))
        copy.load_state(self.state())
        return copy


def _apply_cfg_dropout(y, kind: str, null_index, drop: np.ndarray):
    """Replaces dropped conditions with the null condition, in-band."""
    if y is None or kind == "none":
        return y
    if kind == "label":
        y_eff = np.asarray(y, dtype=np.int64).copy()
        y_eff[drop] = null_index
        return y_eff
    y_eff = np.asarray(y, dtype=np.float64).copy()
    y_eff[drop] = np.nan
    return y_eff


def fm_train_step(batch, model: FlowMatchModel, cfg: TrainConfig,
                  opt: AdamW, rng: np.random.Generator) -> float:
    """One velocity-regression step; returns the batch loss."""
    x0, y = batch
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    t = rng.uniform(0.0, 1.0, size=n)
    eps = rng.standard_normal(x0.shape)
    if model.conditioner.dim > 0:
        drop = rng.random(n) < cfg.cfg_dropout
        y = _apply_cfg_dropout(y, model.config.conditioning, model.null_index, drop)
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    target = eps - x0
    with Tape() as tape:
        v = model.velocity(Tensor(x_t), t, y)
        loss = gc.tmean((v - Tensor(target)) ** 2)
        params = model.parameters()
        gs = grad(loss, params, tape=tape)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise TrainingDiverged("flow-matching loss is not finite")
    opt.step([g.data for g in gs])
    return loss_val


def fm_sample(model: FlowMatchModel, y, steps: int, n: int,
              rng: np.random.Generator, w: float = 0.0) -> np.ndarray:
    """Euler integration of the learned velocity from t=1 down to t=0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.standard_normal((n, model.config.dim))
    h = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * h
        v = model.velocity(Tensor(x), t, y).data
        if w > 0.0:
            v_u = model.velocity(Tensor(x), t, None).data
            v = (1.0 + w) * v - w * v_u
        x = x - h * v
    return x


def fm_posterior_sample(model: FlowMatchModel, schedule: TimeSchedule, n: int,
                        y, rng: np.random.Generator, w: float = 0.0):
    """Gaussian-posterior ancestral sampling driven by the velocity net.

    Each step converts v into a clean estimate x0_hat = x_t - t*v and draws
    the next level from the closed-form posterior. Mirrors the
    finetune-initialized trajectory sampler; kept independent so the
    initialization equivalence can be tested between two code paths.
    """
    times = schedule.as_array()
    steps = len(times) - 1
    dim = model.config.dim
    x = rng.standard_normal((n, dim))
    states = [x]
    for k in range(steps, 0, -1):
        t_k, s_k = times[k], times[k - 1]
        v = model.velocity(Tensor(x), t_k, y).data
        if w > 0.0:
            v_u = model.velocity(Tensor(x), t_k, None).data
            v = (1.0 + w) * v - w * v_u
        x0_hat = x - t_k * v
        a, b, c = posterior_coeffs(t_k, s_k)
        mu = a * x + b * x0_hat
        z = rng.standard_normal((n, dim))
        x = mu + max(c, MIN_POSTERIOR_STD) * z
        states.append(x)
    states = np.stack(states[::-1], axis=0)
    return states[0].copy(), Trajectory(states=states, times=times)


# -- NTM assembly ---------------------------------------------------------------


@dataclass
class NtmConfig:
    dim: int = 2
    positions: int = 2
    channels: int = 1
    blocks: int = 2
    transporter_width: int = 64
    predictor_width: int = 128
    predictor_depth: int = 4
    time_emb: int = 16
    conditioning: str = "none"
    n_classes: int = 0
    cond_dim: int = 2
    label_emb: int = 16
    allowed_t: tuple[int, ...] = (4,)
    t_min_lo: float = 0.0
    t_min_hi: float = 0.05
    sample_t_min: float = 0.02
    skip_threshold: float = 1.0
    attention: bool = False
    predictor_kind: str = "mlp"  # mlp | finetune | linear
    seed: int = 0

    def __post_init__(self):
        if self.positions * self.channels != self.dim:
            raise ValueError("positions * channels must equal dim")
        if not self.allowed_t:
            raise ValueError("allowed step-count set must be nonempty")
        for t_count in self.allowed_t:
            if self.sample_t_min >= 1.0 / t_count:
                raise ValueError(
                    f"sample_t_min={self.sample_t_min} collides with the "
                    f"T={t_count} grid"
                )
        if not (0.0 <= self.t_min_lo <= self.t_min_hi <= 0.05):
            raise ValueError("t_min range must satisfy 0 <= lo <= hi <= 0.05")


class NtmModel(Module):
    """Transporter blocks + predictor + schedule/conditioning config."""

    def __init__(self, config: NtmConfig, predictor=None,
                 frozen_fm: FlowMatchModel | None = None):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        block_cls = AttentionTransporterBlock if config.attention else TransporterBlock
        self.blocks = []
        for i in range(config.blocks):
            block = block_cls(
                config.positions, config.channels, rng,
                width=config.transporter_width, reverse_scan=bool(i % 2),
                time_emb=config.time_emb,
            )
            self.blocks.append(self.add_child(f"block{i}", block))
        if predictor is None:
            predictor = MlpPredictor(
                config.dim, rng, width=config.predictor_width,
                depth=config.predictor_depth, time_emb=config.time_emb,
                conditioning=config.conditioning, n_classes=config.n_classes,
                cond_dim=config.cond_dim, label_emb=config.label_emb,
            )
        self.predictor = self.add_child("predictor", predictor)
        self.frozen_fm = frozen_fm  # not a child: excluded from training/grads

    # -- structural helpers --

    @property
    def positions(self) -> int:
        return self.config.positions

    @property
    def channels(self) -> int:
        return self.config.channels

    @property
    def null_index(self) -> int | None:
        cond = getattr(self.predictor, "conditioner", None)
        return getattr(cond, "null_index", None)

    def transports(self, t) -> bool:
        """Whether levels at time t pass through the transporter."""
        t_max = float(np.max(np.asarray(t, dtype=np.float64)))
        return t_max < min(self.config.skip_threshold, 1.0)

    def schedule_for(self, step_count: int, t_min: float | None = None) -> TimeSchedule:
        if step_count not in self.config.allowed_t:
            raise ValueError(
                f"step count {step_count} not in allowed set {self.config.allowed_t}"
            )
        return build_schedule(step_count, self.config.sample_t_min if t_min is None else t_min)

    def check_trajectory(self, trajectory: Trajectory) -> None:
        steps = trajectory.level_count - 1
        if steps not in self.config.allowed_t:
            raise ValueError(
                f"trajectory has {steps} steps, allowed set is {self.config.allowed_t}"
            )
        times = trajectory.times
        top = times[-1] if times.ndim == 1 else times[:, -1]
        if not np.all(top == 1.0):
            raise ValueError("trajectory top level must sit at t = 1")

    def transport(self, x, t, steps: int):
        """x-space (B, D) -> (u (B, D), logdet (B,)) through all blocks."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        batch = x.shape[0]
        x3 = x.reshape((batch, self.positions, self.channels))
        u3, logdet = transporter_forward(x3, t, steps, self.blocks)
        return u3.reshape((batch, self.config.dim)), logdet

    def trainable_parameters(self) -> list[Tensor]:
        return self.parameters()

    def save_state(self) -> dict[str, np.ndarray]:
        state = self.state()
        if self.frozen_fm is not None:
            state.update(self.frozen_fm.state(prefix="frozen_fm."))
        return state

    def load_full_state(self, state: dict[str, np.ndarray]) -> None:
        own = {k: v for k, v in state.items() if not k.startswith("frozen_fm.")}
        self.load_state(own)
        if self.frozen_fm is not None:
            frozen = {
                k[len("frozen_fm."):]: v
                for k, v in state.items() if k.startswith("frozen_fm.")
            }
            self.frozen_fm.load_state(frozen)


class FinetunePredictor(Module):
    """Predictor wrapping a velocity backbone via the posterior closed form.

    mu = A*u_t + B*(u_t - t*v); sigma = C * exp(delta) with delta from a
    zero-initialized head on the backbone's hidden features, so at
    initialization the predictor is exactly the pretrained Gaussian
    posterior.
    """

    def __init__(self, backbone: FlowMatchModel, rng: np.random.Generator):
        super().__init__()
        self.backbone = self.add_child("backbone", backbone)
        self.proj_out = self.add_child(
            "proj_out", Linear(backbone.config.width, backbone.config.dim, rng,
                               zero_init=True)
        )

    @property
    def conditioner(self):
        return self.backbone.conditioner

    def params(self, u_t: Tensor, t, s, step_count: int, y) -> CouplingParams:
        batch, dim = u_t.shape
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        s_arr = np.broadcast_to(np.asarray(s, dtype=np.float64), (batch,))
        v, hidden = self.backbone.velocity_and_hidden(u_t, t_arr, y)
        t_full = np.broadcast_to(t_arr[:, None], (batch, dim)).copy()
        u0_hat = u_t - Tensor(t_full) * v
        a, b, c = posterior_coeffs(t_arr, s_arr)
        a_full = np.broadcast_to(np.asarray(a).reshape(-1, 1), (batch, dim)).copy()
        b_full = np.broadcast_to(np.asarray(b).reshape(-1, 1), (batch, dim)).copy()
        c_col = np.maximum(np.asarray(c, dtype=np.float64), MIN_POSTERIOR_STD)
        c_full = np.broadcast_to(c_col.reshape(-1, 1), (batch, dim)).copy()
        mu = Tensor(a_full) * u_t + Tensor(b_full) * u0_hat
        delta = gc.clamp(self.proj_out(hidden), -RAW_CLAMP, RAW_CLAMP)
        sigma = Tensor(c_full) * gc.exp(delta)
        return CouplingParams(mu=mu, sigma=sigma)


def finetune_init(fm: FlowMatchModel, config: NtmConfig) -> NtmModel:
    """NTM whose init reproduces the pretrained Gaussian-posterior sampler.

    The trainable copy of the velocity net seeds the predictor; a second,
    frozen copy provides the mean-alignment target during finetuning. The
    transporter starts as the identity (zero-initialized heads).
    """
    if fm.config.dim != config.dim:
        raise ValueError("dimension mismatch between backbone and NTM config")
    config = replace(config, predictor_kind="finetune",
                     conditioning=fm.config.conditioning,
                     n_classes=fm.config.n_classes,
                     cond_dim=fm.config.cond_dim)
    rng = np.random.default_rng(config.seed + 1)
    predictor = FinetunePredictor(fm.clone(), rng)
    return NtmModel(config, predictor=predictor, frozen_fm=fm.clone())


# -- losses ---------------------------------------------------------------------


def _frozen_posterior_means(model: NtmModel, trajectory: Trajectory, y) -> list[np.ndarray]:
    """Per-step posterior means from the frozen backbone, x-space inputs."""
    fm = model.frozen_fm
    levels = trajectory.level_count
    batch = trajectory.states.shape[1]
    means = []
    for k in range(1, levels):
        t_k = np.broadcast_to(np.asarray(trajectory.time_at(k), dtype=np.float64), (batch,))
        s_k = np.broadcast_to(np.asarray(trajectory.time_at(k - 1), dtype=np.float64), (batch,))
        x_t = trajectory.states[k]
        v = fm.velocity(Tensor(x_t), t_k, y).data
        x0_hat = x_t - t_k[:, None] * v
        a, b, _ = posterior_coeffs(t_k, s_k)
        means.append(np.asarray(a).reshape(-1, 1) * x_t
                     + np.asarray(b).reshape(-1, 1) * x0_hat)
    return means


def aux_loss(mu_p, mu_fm) -> Tensor:
    """Mean squared gap between predictor means and frozen-backbone means.

    Accepts single tensors or aligned lists (one entry per step).
    """
    if isinstance(mu_p, (list, tuple)):
        if len(mu_p) != len(mu_fm) or not mu_p:
            raise ValueError("mean lists must align and be nonempty")
        terms = [gc.tmean((p - Tensor(np.asarray(f))) ** 2) for p, f in zip(mu_p, mu_fm)]
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total * (1.0 / len(terms))
    mu_fm = mu_fm if isinstance(mu_fm, Tensor) else Tensor(np.asarray(mu_fm))
    return gc.tmean((mu_p - mu_fm) ** 2)


def lambda_at(step: int, lam0: float, total_steps: int) -> float:
    """Cosine decay of the aux weight from lam0 to 0 over the budget."""
    if lam0 == 0.0:
        return 0.0
    frac = min(max(step, 0) / max(total_steps, 1), 1.0)
    return lam0 * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


def _resolve_ranges(model: NtmModel, cfg: TrainConfig | None):
    allowed = tuple(cfg.t_set) if cfg is not None and cfg.t_set else model.config.allowed_t
    if cfg is not None and cfg.t_min_range is not None:
        lo, hi = cfg.t_min_range
    else:
        lo, hi = model.config.t_min_lo, model.config.t_min_hi
    return allowed, float(lo), float(hi)


def endtoend_loss(x0, y, model: NtmModel, rng: np.random.Generator,
                  cfg: TrainConfig | None = None, collect_for_aux: bool = False):
    """Exact trajectory NLL with per-example T and anchor-time draws.

    Batch elements are grouped by their sampled T; each group runs one
    vectorized NLL and groups are combined weighted by size. Returns
    (loss, diagnostics, aux_items) where aux_items pairs each group's
    trajectory with its predictor means when requested.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[0]
    allowed, lo, hi = _resolve_ranges(model, cfg)
    t_assign = rng.choice(np.asarray(allowed), size=batch)
    t0 = rng.uniform(lo, hi, size=batch)
    total = None
    diagnostics: dict[str, object] = {"groups": {}}
    aux_items = []
    for steps in sorted(set(int(t) for t in allowed)):
        idx = np.flatnonzero(t_assign == steps)
        if idx.size == 0:
            continue
        sched = build_schedule(steps, model.config.sample_t_min)
        traj = sample_trajectory(x0[idx], sched, rng, t0=t0[idx])
        y_g = None if y is None else np.asarray(y)[idx]
        loss_g, diag_g = ntm_nll(traj, y_g, model, reduce="mean",
                                 collect_mu=collect_for_aux)
        weighted = loss_g * (idx.size / batch)
        total = weighted if total is None else total + weighted
        diagnostics["groups"][steps] = diag_g
        if collect_for_aux:
            aux_items.append((traj, y_g, diag_g["mu_tensors"], idx.size / batch))
    diagnostics["nll"] = float(total.data)
    return total, diagnostics, aux_items


def pairwise_loss(x0, y, model: NtmModel, rng: np.random.Generator,
                  cfg: TrainConfig | None = None, collect_for_aux: bool = False):
    """Single-factor NLL on one random consecutive pair per element.

    Each element draws T from the allowed set and a step index uniformly;
    the pair (x_s, x_t) is simulated from the exact forward joint, and the
    loss is the coupling factor of that single step, including the
    transporter log-determinant of the target level.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[0]
    allowed, lo, hi = _resolve_ranges(model, cfg)
    t_assign = rng.choice(np.asarray(allowed), size=batch)
    t0 = rng.uniform(lo, hi, size=batch)
    step_pick = np.floor(rng.random(batch) * t_assign).astype(np.int64) + 1
    eps_s = rng.standard_normal(x0.shape)
    eps_t = rng.standard_normal(x0.shape)
    total = None
    diagnostics: dict[str, object] = {"pairs": {}}
    aux_items = []
    for steps in sorted(set(int(t) for t in allowed)):
        sched_times = build_schedule(steps, model.config.sample_t_min).as_array()
        for k in range(1, steps + 1):
            idx = np.flatnonzero((t_assign == steps) & (step_pick == k))
            if idx.size == 0:
                continue
            t_k = sched_times[k]
            s_k = t0[idx] if k == 1 else np.full(idx.size, sched_times[k - 1])
            x_s = (1.0 - s_k)[:, None] * x0[idx] + s_k[:, None] * eps_s[idx]
            x_t = forward_transition(x_s, s_k, t_k, eps_t[idx])
            y_g = None if y is None else np.asarray(y)[idx]
            if model.transports(t_k):
                u_t, _ = model.transport(x_t, t_k, steps)
            else:
                u_t = Tensor(x_t)
            if model.transports(s_k):
                u_s, logdet_s = model.transport(x_s, s_k, steps)
            else:
                u_s, logdet_s = Tensor(x_s), Tensor(np.zeros(idx.size))
            fac, params, _ = factor_nll(u_s, u_t, t_k, s_k, y_g,
                                        model.predictor, steps)
            loss_g = gc.tmean(fac - logdet_s)
            weighted = loss_g * (idx.size / batch)
            total = weighted if total is None else total + weighted
            diagnostics["pairs"][(steps, k)] = float(loss_g.data)
            if collect_for_aux:
                times_pair = np.column_stack(
                    [s_k, np.full(idx.size, t_k)]
                )
                traj_like = _PairStates(x_s, x_t, times_pair)
                aux_items.append((traj_like, y_g, [params.mu], idx.size / batch))
    diagnostics["nll"] = float(total.data)
    return total, diagnostics, aux_items


class _PairStates:
    """Minimal trajectory stand-in for aux computation on a sampled pair."""

    def __init__(self, x_s: np.ndarray, x_t: np.ndarray, times: np.ndarray):
        self.states = np.stack([x_s, x_t], axis=0)
        self.times = times  # (B, 2): per-element (s, t)
        self.level_count = 2

    def time_at(self, k: int) -> np.ndarray:
        return self.times[:, k]


def train_step(batch, model: NtmModel, cfg: TrainConfig, opt: AdamW,
               rng: np.random.Generator, step: int) -> StepMetrics:
    """One training step: draws, CFG dropout, loss, aux, update, metrics."""
    t_start = time.perf_counter()
    x0, y = batch
    x0 = np.asarray(x0, dtype=np.float64)
    batch_n = x0.shape[0]
    kind = model.config.conditioning
    if kind != "none" and y is not None:
        drop = rng.random(batch_n) < cfg.cfg_dropout
        y = _apply_cfg_dropout(y, kind, model.null_index, drop)

    want_aux = model.frozen_fm is not None
    lam = lambda_at(step, cfg.lam0, cfg.iters)
    loss_fn = endtoend_loss if cfg.mode == "end-to-end" else pairwise_loss
    with Tape() as tape:
        nll_t, diagnostics, aux_items = loss_fn(
            x0, y, model, rng, cfg=cfg, collect_for_aux=want_aux
        )
        aux_t = None
        drift_sq = 0.0
        if want_aux and aux_items:
            terms = []
            for traj, y_g, mu_tensors, weight in aux_items:
                mu_fm = _frozen_posterior_means(model, traj, y_g)
                term = aux_loss(mu_tensors, mu_fm)
                terms.append((term, weight))
                drift_sq += weight * float(term.data)
            aux_t = terms[0][0] * terms[0][1]
            for term, weight in terms[1:]:
                aux_t = aux_t + term * weight
        total_t = nll_t if (aux_t is None or lam == 0.0) else nll_t + aux_t * lam
        params = model.trainable_parameters()
        gs = grad(total_t, params, tape=tape)

    grads = [g.data for g in gs]
    gnorm = grad_global_norm(grads)
    nll_val = float(nll_t.data)
    aux_val = float(aux_t.data) if aux_t is not None else 0.0
    total_val = float(total_t.data)
    if not np.isfinite(total_val) or not np.isfinite(gnorm):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: total={total_val}, grad_norm={gnorm}",
            diagnostics={"step": step, "nll": nll_val, "aux": aux_val,
                         "diagnostics": _plain(diagnostics)},
        )
    opt.step(grads)
    wall_ms = (time.perf_counter() - t_start) * 1e3
    return StepMetrics(
        step=step, nll=nll_val, aux=aux_val, total=total_val, lam=lam,
        grad_norm=gnorm, wall_ms=wall_ms,
        mu_drift=float(np.sqrt(drift_sq)) if want_aux else None,
    )


def _plain(obj):
    """Strips tensors out of a diagnostics structure for dumping."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()
                if not isinstance(v, (Tensor, list)) or k in ("z_rms", "step_nll")}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
