"""Bit-exact model checkpoints: versioned header, JSON config, raw tensors.

Layout (all integers little-endian):

    magic "TRJF" | u32 version | u64 json length | config JSON (UTF-8)
    u64 tensor count, then per tensor:
    u32 name length | name UTF-8 | u32 ndim | u64 dims... | float64 LE data

Tensors are written in sorted name order, so identical states produce
identical files and the content hash is reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from trajflow.model import (
    FinetunePredictor,
    FlowMatchModel,
    FmConfig,
    NtmConfig,
    NtmModel,
)
from trajflow.sampling import Denoiser

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "save_model",
    "load_fm",
    "load_ntm",
    "load_denoiser",
]

MAGIC = b"TRJF"
VERSION = 1


def save_checkpoint(path, kind: str, config: dict, state: dict[str, np.ndarray]) -> None:
    """Writes a checkpoint; the state maps tensor names to float64 arrays."""
    blob = json.dumps({"kind": kind, "config": config}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<Q", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(np.asarray(state[name], dtype=np.float64))
        nm = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns (kind, config dict, state dict); validates magic and version."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (jlen,) = struct.unpack_from("<Q", raw, 8)
    off = 16
    meta = json.loads(raw[off:off + jlen].decode("utf-8"))
    off += jlen
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        state[name] = arr.astype(np.float64).copy()
        off += 8 * size
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return meta["kind"], meta["config"], state


def checkpoint_hash(path) -> str:
    """Content hash of the checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _as_plain(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def _fm_config(d: dict) -> FmConfig:
    return FmConfig(**d)


def _ntm_config(d: dict) -> NtmConfig:
    d = dict(d)
    for key in ("allowed_t",):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return NtmConfig(**d)


def save_model(path, model) -> None:
    """Persists a FlowMatchModel, NtmModel, or Denoiser with its config."""
    if isinstance(model, FlowMatchModel):
        save_checkpoint(path, "fm", {"fm": _as_plain(model.config)}, model.state())
        return
    if isinstance(model, NtmModel):
        config: dict = {"ntm": _as_plain(model.config)}
        if isinstance(model.predictor, FinetunePredictor):
            config["fm"] = _as_plain(model.predictor.backbone.config)
        save_checkpoint(path, "ntm", config, model.save_state())
        return
    if isinstance(model, Denoiser):
        config = {
            "positions": model.positions,
            "channels": model.channels,
            "width": model.width,
            "conditioning": model.conditioning,
            "n_classes": model.n_classes,
            "cond_dim": model.cond_dim,
            "label_emb": model.label_emb,
        }
        save_checkpoint(path, "denoiser", config, model.state())
        return
    raise TypeError(f"cannot checkpoint object of type {type(model).__name__}")


def load_fm(path) -> FlowMatchModel:
    kind, config, state = load_checkpoint(path)
    if kind != "fm":
        raise ValueError(f"{path}: expected a flow-matching checkpoint, got {kind!r}")
    model = FlowMatchModel(_fm_config(config["fm"]))
    model.load_state(state)
    return model


def load_ntm(path) -> NtmModel:
    kind, config, state = load_checkpoint(path)
    if kind != "ntm":
        raise ValueError(f"{path}: expected a model checkpoint, got {kind!r}")
    ncfg = _ntm_config(config["ntm"])
    if ncfg.predictor_kind == "finetune":
        fm = FlowMatchModel(_fm_config(config["fm"]))
        rng = np.random.default_rng(ncfg.seed + 1)
        predictor = FinetunePredictor(fm, rng)
        frozen = FlowMatchModel(_fm_config(config["fm"]))
        model = NtmModel(ncfg, predictor=predictor, frozen_fm=frozen)
        model.load_full_state(state)
        return model
    if ncfg.predictor_kind != "mlp":
        raise ValueError(f"cannot restore predictor kind {ncfg.predictor_kind!r}")
    model = NtmModel(ncfg)
    model.load_state(state)
    return model


def load_denoiser(path) -> Denoiser:
    kind, config, state = load_checkpoint(path)
    if kind != "denoiser":
        raise ValueError(f"{path}: expected a denoiser checkpoint, got {kind!r}")
    den = Denoiser(
        int(config["positions"]), int(config["channels"]),
        np.random.default_rng(0), width=int(config["width"]),
        conditioning=config.get("conditioning", "none"),
        n_classes=int(config.get("n_classes", 0)),
        cond_dim=int(config.get("cond_dim", 2)),
        label_emb=int(config.get("label_emb", 16)),
    )
    den.load_state(state)
    return den
