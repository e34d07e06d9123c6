"""Command-line pipeline: pretrain, train, finetune, sample, distill, verify, eval.

Every command is deterministic under a fixed seed and config. Artifact
directories always receive a manifest.txt with the run id, seed, config
snapshot, checkpoint hash, and timestamps. Wall-clock columns and manifest
timestamps are the only fields that vary between reruns.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    # Must run before numpy is first imported to take effect for BLAS pools.
    cap = os.environ.get("TRAJFLOW_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_cap_threads()

import argparse
import hashlib
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import (
    checkpoint_hash,
    load_checkpoint,
    load_denoiser,
    load_fm,
    load_ntm,
    save_model,
)
from .data_metrics import Dataset, energy_distance, make_dataset
from .flow import ntm_nll
from .model import (
    AdamW,
    FlowMatchModel,
    FmConfig,
    NtmConfig,
    NtmModel,
    TrainConfig,
    TrainingDiverged,
    finetune_init,
    fm_sample,
    fm_train_step,
    train_step,
)
from .runconfig import ConfigError, RunConfig, read_config
from .sampling import Denoiser, SampleRequest, denoiser_train_step, sample
from .schedule import sample_trajectory
from .verify import SUITE_NAMES, format_report, run_suites

__all__ = ["main"]

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_REQUEST = 4
EXIT_OPTIONAL = 5


class CliError(Exception):
    """Command failure carrying its process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- artifact helpers --------------------------------------------------------------


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(c) for c in row) + "\n")


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _run_id(command: str, seed: int, snapshot: str) -> str:
    digest = hashlib.sha256(f"{command}|{seed}|{snapshot}".encode("utf-8"))
    return digest.hexdigest()[:12]


def _write_manifest(out_dir: Path, command: str, seed: int, snapshot: str,
                    started: str, checkpoint: Path | None = None,
                    artifacts=()) -> None:
    lines = [
        f"run_id = {_run_id(command, seed, snapshot)}",
        f"command = {command}",
        f"seed = {seed}",
        f"started_utc = {started}",
        f"finished_utc = {_utc_now()}",
        f"config_sha256 = {hashlib.sha256(snapshot.encode('utf-8')).hexdigest()}",
    ]
    if checkpoint is not None:
        lines.append(f"checkpoint = {checkpoint.name}")
        lines.append(f"checkpoint_sha256 = {checkpoint_hash(checkpoint)}")
    for name in artifacts:
        lines.append(f"artifact = {name}")
    lines.append("")
    lines.append("[config snapshot]")
    lines.append(snapshot)
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _density_ppm(path: Path, points: np.ndarray, bins: int = 256,
                 lo: float = -4.0, hi: float = 4.0) -> None:
    """2-D sample histogram as a binary PPM heatmap (dark = dense)."""
    hist, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins,
                                range=[[lo, hi], [lo, hi]])
    img = hist.T[::-1]
    peak = img.max()
    v = np.sqrt(img / peak) if peak > 0 else img
    px = (255 - np.round(255 * v)).astype(np.uint8)
    rgb = np.repeat(px[:, :, None], 3, axis=2)
    header = f"P6\n{bins} {bins}\n255\n".encode("ascii")
    path.write_bytes(header + rgb.tobytes())


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{what} {path} not found")
    return path


# -- config -> objects -------------------------------------------------------------


def _numeric(raw: str):
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def _dataset_from_config(cfg: RunConfig) -> Dataset:
    name = cfg.require("data", "name")
    params = {}
    for key, raw in cfg.sections.get("data", {}).items():
        if key == "name":
            continue
        try:
            params[key] = _numeric(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for [data] {key}: {raw!r}") from exc
    return make_dataset(name, params or None)


def _resolve_conditioning(cfg: RunConfig, section: str, data: Dataset):
    conditioning = cfg.get(section, "conditioning", "none")
    n_classes = cfg.get_int(section, "n_classes", 0)
    if conditioning == "label":
        if n_classes == 0:
            n_classes = data.n_classes
        if n_classes == 0:
            raise ConfigError(
                f"[{section}] conditioning=label but dataset "
                f"{data.name!r} has no labels")
    return conditioning, n_classes


def _fm_config_from(cfg: RunConfig, data: Dataset) -> FmConfig:
    conditioning, n_classes = _resolve_conditioning(cfg, "fm", data)
    return FmConfig(
        dim=data.dim,
        width=cfg.get_int("fm", "width", 64),
        depth=cfg.get_int("fm", "depth", 3),
        time_emb=cfg.get_int("fm", "time_emb", 16),
        conditioning=conditioning,
        n_classes=n_classes,
        cond_dim=cfg.get_int("fm", "cond_dim", 2),
        label_emb=cfg.get_int("fm", "label_emb", 16),
        seed=cfg.get_int("fm", "seed", 0),
    )


def _ntm_config_from(cfg: RunConfig, data: Dataset) -> NtmConfig:
    conditioning, n_classes = _resolve_conditioning(cfg, "ntm", data)
    positions = cfg.get_int("ntm", "positions", data.dim)
    channels = cfg.get_int("ntm", "channels", data.dim // positions)
    return NtmConfig(
        dim=data.dim,
        positions=positions,
        channels=channels,
        blocks=cfg.get_int("ntm", "blocks", 2),
        transporter_width=cfg.get_int("ntm", "transporter_width", 64),
        predictor_width=cfg.get_int("ntm", "predictor_width", 128),
        predictor_depth=cfg.get_int("ntm", "predictor_depth", 4),
        time_emb=cfg.get_int("ntm", "time_emb", 16),
        conditioning=conditioning,
        n_classes=n_classes,
        cond_dim=cfg.get_int("ntm", "cond_dim", 2),
        label_emb=cfg.get_int("ntm", "label_emb", 16),
        allowed_t=cfg.get_int_list("ntm", "allowed_t", (4,)),
        t_min_lo=cfg.get_float("ntm", "t_min_lo", 0.0),
        t_min_hi=cfg.get_float("ntm", "t_min_hi", 0.05),
        sample_t_min=cfg.get_float("ntm", "sample_t_min", 0.02),
        skip_threshold=cfg.get_float("ntm", "skip_threshold", 1.0),
        attention=cfg.get_bool("ntm", "attention", False),
        seed=cfg.get_int("ntm", "seed", 0),
    )


def _train_config_from(cfg: RunConfig, section: str = "train",
                       lam0_default: float = 0.0) -> TrainConfig:
    t_set = None
    if cfg.has(section, "t_set"):
        t_set = cfg.get_int_list(section, "t_set")
    t_min_range = None
    if cfg.has(section, "t_min_lo") or cfg.has(section, "t_min_hi"):
        t_min_range = (cfg.get_float(section, "t_min_lo", 0.0),
                       cfg.get_float(section, "t_min_hi", 0.05))
    return TrainConfig(
        mode=cfg.get(section, "mode", "end-to-end"),
        lr=cfg.get_float(section, "lr", 3e-4),
        lr_min=cfg.get_float(section, "lr_min", 0.0),
        weight_decay=cfg.get_float(section, "weight_decay", 1e-4),
        warmup=cfg.get_int(section, "warmup", 200),
        batch_size=cfg.get_int(section, "batch_size", 256),
        cfg_dropout=cfg.get_float(section, "cfg_dropout", 0.1),
        lam0=cfg.get_float(section, "lam0", lam0_default),
        iters=cfg.get_int(section, "iters", 2000),
        seed=cfg.get_int(section, "seed", 0),
        t_set=t_set,
        t_min_range=t_min_range,
    )


def _load_run_config(path_str: str) -> RunConfig:
    path = Path(path_str)
    if not path.exists():
        raise CliError(EXIT_CONFIG, f"config file {path} does not exist")
    return read_config(path)


def _build(fn, *args):
    """Runs a config->object builder, mapping validation errors to exit 2."""
    try:
        return fn(*args)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- training commands -------------------------------------------------------------


def cmd_pretrain_fm(args) -> int:
    started = _utc_now()
    cfg = _load_run_config(args.config)
    data = _build(_dataset_from_config, cfg)
    fm_cfg = _build(_fm_config_from, cfg, data)
    tcfg = _build(_train_config_from, cfg)
    out = _ensure_out(args.out)
    model = FlowMatchModel(fm_cfg)
    opt = AdamW.from_config(model.parameters(), tcfg)
    rng = np.random.default_rng(tcfg.seed)
    rows = []
    for step in range(tcfg.iters):
        t0 = time.perf_counter()
        x0, labels = data.sample(tcfg.batch_size, rng)
        y = labels if fm_cfg.conditioning == "label" else None
        loss = fm_train_step((x0, y), model, tcfg, opt, rng)
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append([step, loss, opt.lr_at(step), wall_ms])
    _write_csv(out / "metrics.csv", ["step", "loss", "lr", "wall_ms"], rows)
    ckpt = out / "fm.trjf"
    save_model(ckpt, model)
    _write_manifest(out, "pretrain-fm", tcfg.seed, cfg.snapshot(), started,
                    checkpoint=ckpt, artifacts=["metrics.csv", "fm.trjf"])
    print(f"pretrain-fm: {tcfg.iters} steps, final loss {rows[-1][1]:.6f}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


def _ntm_training_loop(model, data, tcfg: TrainConfig, out: Path,
                       with_drift: bool) -> list:
    opt = AdamW.from_config(model.trainable_parameters(), tcfg)
    rng = np.random.default_rng(tcfg.seed)
    rows = []
    for step in range(tcfg.iters):
        x0, labels = data.sample(tcfg.batch_size, rng)
        y = labels if model.config.conditioning == "label" else None
        metrics = train_step((x0, y), model, tcfg, opt, rng, step)
        row = [metrics.step, metrics.nll, metrics.aux, metrics.total,
               metrics.lam, metrics.grad_norm, metrics.wall_ms]
        if with_drift:
            row.append(metrics.mu_drift if metrics.mu_drift is not None else 0.0)
        rows.append(row)
    return rows


_TRAIN_HEADER = ["step", "nll", "aux", "total", "lambda", "grad_norm", "wall_ms"]


def cmd_train(args) -> int:
    started = _utc_now()
    cfg = _load_run_config(args.config)
    data = _build(_dataset_from_config, cfg)
    ntm_cfg = _build(_ntm_config_from, cfg, data)
    tcfg = _build(_train_config_from, cfg)
    out = _ensure_out(args.out)
    model = NtmModel(ntm_cfg)
    rows = _ntm_training_loop(model, data, tcfg, out, with_drift=False)
    _write_csv(out / "metrics.csv", _TRAIN_HEADER, rows)
    ckpt = out / "ntm.trjf"
    save_model(ckpt, model)
    _write_manifest(out, "train", tcfg.seed, cfg.snapshot(), started,
                    checkpoint=ckpt, artifacts=["metrics.csv", "ntm.trjf"])
    print(f"train: {tcfg.iters} steps, final nll {rows[-1][1]:.6f}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    started = _utc_now()
    cfg = _load_run_config(args.config)
    fm_path = _existing(args.fm_checkpoint, "flow-matching checkpoint")
    data = _build(_dataset_from_config, cfg)
    ntm_cfg = _build(_ntm_config_from, cfg, data)
    tcfg = _build(_train_config_from, cfg, "train", 2.5)
    out = _ensure_out(args.out)
    fm = load_fm(fm_path)
    if fm.config.dim != data.dim:
        raise CliError(EXIT_CONFIG,
                       f"checkpoint dim {fm.config.dim} != dataset dim {data.dim}")
    model = _build(finetune_init, fm, ntm_cfg)
    rows = _ntm_training_loop(model, data, tcfg, out, with_drift=True)
    _write_csv(out / "metrics.csv", _TRAIN_HEADER + ["mu_drift"], rows)
    ckpt = out / "ntm.trjf"
    save_model(ckpt, model)
    _write_manifest(out, "finetune", tcfg.seed, cfg.snapshot(), started,
                    checkpoint=ckpt, artifacts=["metrics.csv", "ntm.trjf"])
    print(f"finetune: {tcfg.iters} steps, final nll {rows[-1][1]:.6f}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


# -- sampling and distillation -----------------------------------------------------


def _load_any_model(path: Path):
    try:
        kind, _, _ = load_checkpoint(path)
    except ValueError as exc:
        raise CliError(EXIT_MISSING, f"unreadable checkpoint {path}: {exc}") from exc
    if kind == "fm":
        return "fm", load_fm(path)
    if kind == "ntm":
        return "ntm", load_ntm(path)
    raise CliError(EXIT_REQUEST, f"checkpoint kind {kind!r} cannot be sampled")


def _labels_for(model_conditioning: str, n_classes: int, label, n: int):
    if label is None:
        return None
    if model_conditioning != "label":
        raise CliError(EXIT_REQUEST, "--label requires a label-conditioned model")
    if not 0 <= label < n_classes:
        raise CliError(EXIT_REQUEST,
                       f"label {label} out of range [0, {n_classes})")
    return np.full(n, label, dtype=np.int64)


def cmd_sample(args) -> int:
    started = _utc_now()
    ckpt_path = _existing(args.checkpoint, "checkpoint")
    kind, model = _load_any_model(ckpt_path)
    out = _ensure_out(args.out)
    dim = model.config.dim
    snapshot = (f"[sample]\ncheckpoint = {ckpt_path}\nn = {args.n}\n"
                f"steps = {args.steps}\ncfg_w = {args.cfg_w}\n"
                f"denoise = {args.denoise}\nlabel = {args.label}\n")

    header = [f"x{i}" for i in range(dim)]
    y = _labels_for(model.config.conditioning, model.config.n_classes,
                    args.label, args.n)
    if y is not None:
        header = header + ["label"]

    artifacts = ["samples.csv"]
    if args.n == 0:
        _write_csv(out / "samples.csv", header, [])
        _write_manifest(out, "sample", args.seed, snapshot, started,
                        artifacts=artifacts)
        print("sample: n=0, wrote header-only samples.csv")
        return EXIT_OK

    trajectory = None
    if kind == "ntm":
        denoiser = None
        if args.denoise == "learned":
            if not args.denoiser_checkpoint:
                raise CliError(
                    EXIT_OPTIONAL,
                    "--denoise learned needs --denoiser-checkpoint; "
                    "run distill-denoiser to create one")
            den_path = Path(args.denoiser_checkpoint)
            if not den_path.exists():
                raise CliError(
                    EXIT_OPTIONAL,
                    f"denoiser checkpoint {den_path} not found; "
                    "run distill-denoiser to create one")
            denoiser = load_denoiser(den_path)
        try:
            req = SampleRequest(n=args.n, step_count=args.steps, y=y,
                                w=args.cfg_w, seed=args.seed,
                                denoise=args.denoise)
            final, trajectory = sample(model, req, denoiser=denoiser)
        except ValueError as exc:
            raise CliError(EXIT_REQUEST, str(exc)) from exc
    else:
        if args.denoise != "none":
            raise CliError(EXIT_REQUEST,
                           "denoising applies only to trajectory models")
        if args.steps < 1:
            raise CliError(EXIT_REQUEST, "steps must be >= 1")
        rng = np.random.default_rng(args.seed)
        final = fm_sample(model, y, args.steps, args.n, rng, w=args.cfg_w)

    if y is not None:
        rows = [list(final[i]) + [int(y[i])] for i in range(args.n)]
    else:
        rows = [list(final[i]) for i in range(args.n)]
    _write_csv(out / "samples.csv", header, rows)

    if args.trajectory and trajectory is not None:
        traj_header = ["level", "time", "sample"] + [f"x{i}" for i in range(dim)]
        traj_rows = []
        for k in range(trajectory.level_count):
            t_k = float(trajectory.times[k])
            for i in range(args.n):
                traj_rows.append([k, t_k, i] + list(trajectory.states[k, i]))
        _write_csv(out / "trajectory.csv", traj_header, traj_rows)
        artifacts.append("trajectory.csv")

    if dim == 2:
        _density_ppm(out / "density.ppm", final)
        artifacts.append("density.ppm")

    _write_manifest(out, "sample", args.seed, snapshot, started,
                    artifacts=artifacts)
    print(f"sample: wrote {args.n} samples to {out / 'samples.csv'}")
    return EXIT_OK


def cmd_distill_denoiser(args) -> int:
    started = _utc_now()
    cfg = _load_run_config(args.config)
    ckpt_path = _existing(args.checkpoint, "checkpoint")
    kind, _, _ = load_checkpoint(ckpt_path)
    if kind != "ntm":
        raise CliError(EXIT_REQUEST,
                       "distill-denoiser needs a trajectory-model checkpoint")
    model = load_ntm(ckpt_path)
    out = _ensure_out(args.out)

    tcfg = _build(_train_config_from, cfg, "distill")
    steps_t = cfg.get_int("distill", "steps", min(model.config.allowed_t))
    if steps_t not in model.config.allowed_t:
        raise CliError(EXIT_REQUEST,
                       f"steps {steps_t} not in allowed set "
                       f"{model.config.allowed_t}")
    clip_raw = cfg.get("distill", "clip_percentile", "99")
    clip = None if clip_raw.lower() == "none" else float(clip_raw)
    mode = cfg.get("distill", "mode", "joint")
    width = cfg.get_int("distill", "width", 64)

    den_rng = np.random.default_rng(tcfg.seed + 1)
    denoiser = Denoiser(model.positions, model.channels, den_rng, width=width)
    opt = AdamW.from_config(denoiser.parameters(), tcfg)
    rng = np.random.default_rng(tcfg.seed)
    rows = []
    for step in range(tcfg.iters):
        t0 = time.perf_counter()
        req = SampleRequest(n=tcfg.batch_size, step_count=steps_t, seed=0)
        _, traj = sample(model, req, rng=rng)
        loss = denoiser_train_step(traj, None, model, denoiser, opt,
                                   clip_percentile=clip, mode=mode)
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append([step, loss, opt.lr_at(step), wall_ms])
    _write_csv(out / "metrics.csv", ["step", "loss", "lr", "wall_ms"], rows)
    ckpt = out / "denoiser.trjf"
    save_model(ckpt, denoiser)
    _write_manifest(out, "distill-denoiser", tcfg.seed, cfg.snapshot(), started,
                    checkpoint=ckpt, artifacts=["metrics.csv", "denoiser.trjf"])
    print(f"distill-denoiser: {tcfg.iters} steps, final loss {rows[-1][1]:.6f}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


# -- verification and evaluation ---------------------------------------------------


def cmd_verify(args) -> int:
    names = SUITE_NAMES if args.suite == "all" else (args.suite,)
    results = run_suites(names)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_PROPERTY


def cmd_eval(args) -> int:
    started = _utc_now()
    ckpt_path = _existing(args.checkpoint, "checkpoint")
    kind, _, _ = load_checkpoint(ckpt_path)
    if kind != "ntm":
        raise CliError(EXIT_REQUEST, "eval needs a trajectory-model checkpoint")
    model = load_ntm(ckpt_path)
    try:
        data = make_dataset(args.dataset)
    except ValueError as exc:
        raise CliError(EXIT_REQUEST, str(exc)) from exc
    try:
        step_list = tuple(int(p) for p in args.steps.replace(",", " ").split())
    except ValueError as exc:
        raise CliError(EXIT_REQUEST, f"bad --steps list {args.steps!r}") from exc
    if not step_list:
        raise CliError(EXIT_REQUEST, "--steps list is empty")
    for t_count in step_list:
        if t_count not in model.config.allowed_t:
            raise CliError(EXIT_REQUEST,
                           f"steps {t_count} not in allowed set "
                           f"{model.config.allowed_t}")
    out = _ensure_out(args.out)
    dim = model.config.dim
    rows = []
    for t_count in step_list:
        t0 = time.perf_counter()
        final, _ = sample(model, SampleRequest(n=args.n, step_count=t_count,
                                               seed=args.seed))
        wall_ms = (time.perf_counter() - t0) * 1e3 / max(args.n, 1)
        held_rng = np.random.default_rng(args.seed + 1)
        held, _ = data.sample(args.n, held_rng)
        ed = energy_distance(final, held)
        traj = sample_trajectory(held, model.schedule_for(t_count), held_rng)
        nll, _ = ntm_nll(traj, None, model)
        nll_per_dim = float(nll.data) / dim
        rows.append([t_count, ed, nll_per_dim, wall_ms])
    _write_csv(out / "eval.csv",
               ["T", "energy_distance", "heldout_nll", "wall_ms_per_sample"],
               rows)
    snapshot = (f"[eval]\ncheckpoint = {ckpt_path}\ndataset = {args.dataset}\n"
                f"steps = {args.steps}\nn = {args.n}\n")
    _write_manifest(out, "eval", args.seed, snapshot, started,
                    artifacts=["eval.csv"])
    cells = [["T", "energy_distance", "heldout_nll", "wall_ms_per_sample"]]
    cells += [[str(r[0]), f"{r[1]:.6f}", f"{r[2]:.6f}", f"{r[3]:.3f}"]
              for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(4)]
    for row in cells:
        print("  ".join(row[i].rjust(widths[i]) for i in range(4)))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajflow",
        description="Invertible trajectory models: train, sample, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-fm", help="train a flow-matching backbone")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_fm)

    p = sub.add_parser("train", help="train a trajectory model from scratch")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune",
                       help="initialize from a flow-matching checkpoint and train")
    p.add_argument("config")
    p.add_argument("--fm-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--cfg-w", type=float, default=0.0)
    p.add_argument("--denoise", choices=("none", "score", "learned"),
                   default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", type=int, default=None)
    p.add_argument("--denoiser-checkpoint", default=None)
    p.add_argument("--trajectory", action="store_true",
                   help="also write trajectory.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("distill-denoiser",
                       help="distill trajectory denoising into one pass")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill_denoiser)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=SUITE_NAMES + ("all",), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="energy distance and held-out likelihood")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", required=True,
                   help="comma-separated step counts, e.g. 4,8")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    except ValueError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_REQUEST


if __name__ == "__main__":
    sys.exit(main())
