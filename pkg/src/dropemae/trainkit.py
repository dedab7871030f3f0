"""Optimizer, schedules, configuration, and the pretraining loop.

Defaults mirror the full-scale recipe (AdamW with betas (0.9, 0.999),
cosine learning rate 5e-5 -> 1e-6 with 40 warmup epochs, cosine weight
decay 0.04 -> 0.4, batch 4, 300 epochs, width 384, 3 heads, 10 encoder + 3
decoder blocks); desk-scale runs override via config file or CLI flags.
Training is bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import ndtensor as nd
from .checkpoint import load_arrays, save_arrays
from .dmri_io import DWIVolumeSet
from .mae import (MAEModel, ModelConfig, make_mask, mae_forward, mae_loss,
                  sample_training_crop, tau_schedule, voxel_mask)
from .metrics import psnr
from .rng import Rng

__all__ = [
    "TrainConfig", "AdamState", "Checkpoint", "TrainingDiverged",
    "adamw_step", "cosine_schedule", "run_pretrain",
    "save_checkpoint", "load_checkpoint", "restore_model",
    "load_config_file", "config_hash",
]


class TrainingDiverged(RuntimeError):
    """Loss went NaN; carries the path of the last good checkpoint."""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    steps_per_epoch: int = 0  # 0 = ceil(len(dataset) / batch_size)
    warmup_epochs: int = 40
    lr_start: float = 5e-5
    lr_final: float = 1e-6
    wd_start: float = 0.04
    wd_final: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    strategy: str = "alternating"  # spatial | diffusion | alternating
    crop_slices: int = 4
    crop_dirs: int = 15
    tau_lo: float = 0.05
    tau_hi: float = 0.95

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.strategy not in ("spatial", "diffusion", "alternating"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.warmup_epochs > max(self.epochs - 1, 0):
            raise ValueError(f"warmup {self.warmup_epochs} exceeds the schedule span "
                             f"of a {self.epochs}-epoch run")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                         v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict, state: AdamState, lr: float, wd: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Decoupled weight decay followed by the bias-corrected Adam update.

    Reads each parameter's accumulated ``.grad`` (missing grad = zero) and
    updates in place; NaN gradients abort before touching anything.
    """
    b1, b2 = betas
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name!r} at step {state.t + 1}")
        grads[name] = g
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if wd != 0.0:
            p.data -= lr * wd * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def cosine_schedule(t: float, total: float, warmup: float, start: float, final: float) -> float:
    """Linear warmup 0 -> start, then cosine start -> final over [warmup, total]."""
    if warmup > total:
        raise ValueError(f"warmup {warmup} exceeds horizon {total}")
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    if warmup > 0 and t < warmup:
        return start * t / warmup
    if t == warmup:  # endpoints are exact, not cos-rounded
        return start
    if t == total:
        return final
    progress = (t - warmup) / (total - warmup)
    return start + (final - start) * (1.0 - math.cos(math.pi * progress)) / 2.0


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> int:
    """FNV-1a over the canonical config text; stored in checkpoints."""
    text = repr(dataclasses.asdict(model_cfg)) + "|" + repr(dataclasses.asdict(train_cfg))
    h = 0xCBF29CE484222325
    for byte in text.encode():
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class Checkpoint:
    """Named parameter arrays, optimizer moments, epoch counter, config hash."""

    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    epoch: int
    config_hash: int

    def to_arrays(self) -> dict:
        arrays: dict = {}
        for name, arr in self.params.items():
            arrays[f"param.{name}"] = arr
        for name in self.params:
            arrays[f"adam_m.{name}"] = self.adam_m[name]
            arrays[f"adam_v.{name}"] = self.adam_v[name]
        arrays["meta.step"] = np.array(self.step, dtype=np.int64)
        arrays["meta.epoch"] = np.array(self.epoch, dtype=np.int64)
        arrays["meta.config_hash"] = np.array(np.uint64(self.config_hash).astype(np.int64))
        return arrays

    @staticmethod
    def from_arrays(arrays: dict) -> "Checkpoint":
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        return Checkpoint(
            params=params,
            adam_m={k[len("adam_m."):]: v for k, v in arrays.items()
                    if k.startswith("adam_m.")},
            adam_v={k[len("adam_v."):]: v for k, v in arrays.items()
                    if k.startswith("adam_v.")},
            step=int(arrays.get("meta.step", np.array(0))),
            epoch=int(arrays.get("meta.epoch", np.array(0))),
            config_hash=int(np.uint64(arrays.get("meta.config_hash", np.array(0)))),
        )


def save_checkpoint(path, model: MAEModel, state: AdamState, epoch: int,
                    cfg_hash: int) -> None:
    ckpt = Checkpoint(params={name: p.data for name, p in model.parameters().items()},
                      adam_m=state.m, adam_v=state.v, step=state.t, epoch=epoch,
                      config_hash=cfg_hash)
    save_arrays(path, ckpt.to_arrays())


def load_checkpoint(path) -> dict:
    return load_arrays(path)


def restore_model(model: MAEModel, arrays: dict) -> AdamState:
    """Load parameters (and optimizer moments if present) into a model."""
    params = model.parameters()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing {key!r}")
        if arrays[key].shape != p.data.shape:
            raise ValueError(f"{key}: checkpoint shape {arrays[key].shape} "
                             f"vs model {p.data.shape}")
        p.data = arrays[key].astype(p.data.dtype).copy()
    state = AdamState.init(params)
    for name in params:
        if f"adam_m.{name}" in arrays:
            state.m[name] = arrays[f"adam_m.{name}"].astype(np.float64).copy()
            state.v[name] = arrays[f"adam_v.{name}"].astype(np.float64).copy()
    state.t = int(arrays.get("meta.step", np.array(0)))
    return state


def _epoch_order(n_items: int, steps: int, batch: int, rng: Rng) -> list:
    """Item indices for one epoch: shuffled, recycled if steps need more."""
    need = steps * batch
    order: list = []
    while len(order) < need:
        order.extend(int(i) for i in rng.permutation(n_items))
    return order[:need]


def masked_psnr(model: MAEModel, vol: DWIVolumeSet, plan, grid_shape) -> float:
    """Reconstruction PSNR restricted to hidden voxels (no gradients)."""
    recon = mae_forward(model, vol, plan)
    vm = voxel_mask(plan, grid_shape, model.config.patch)
    return psnr(recon.data[vm], vol.signal[vm])


def mean_predictor_psnr(vol: DWIVolumeSet, plan, grid_shape, patch) -> float:
    """Masked PSNR of the per-direction mean-signal baseline.

    Each direction's hidden voxels are predicted by the mean of that
    direction's visible voxels; needs a plan that leaves every direction
    partly visible (spatial masking).
    """
    vm = voxel_mask(plan, grid_shape, patch)
    if np.any(vm.all(axis=(0, 1, 2))):
        raise ValueError("baseline undefined: some direction is fully hidden")
    pred = np.empty_like(vol.signal)
    for j in range(vol.n_dirs):
        m = vm[..., j]
        pred[..., j] = vol.signal[..., j][~m].mean()
    return psnr(pred[vm], vol.signal[vm])


def _eval_grid_shape(vol: DWIVolumeSet, patch) -> tuple:
    return tuple(n // p for n, p in zip(vol.extents, patch))


def run_pretrain(model_cfg: ModelConfig, cfg: TrainConfig, train_vols: Sequence[DWIVolumeSet],
                 val_vols: Sequence[DWIVolumeSet] = (), out_dir: Optional[str] = None,
                 log=None):
    """Train the masked autoencoder; returns (model, history rows).

    Per epoch: sample crops, draw the strategy's mask, run the blended
    reconstruction loss with the epoch's tau, update with AdamW under the
    cosine schedules, and log masked-region PSNR on the first held-out
    volume. Writes checkpoint.drpk and metrics.csv under ``out_dir``.
    """
    if not train_vols:
        raise ValueError("empty training dataset")
    model = MAEModel(model_cfg, seed=cfg.seed)
    params = model.parameters()
    state = AdamState.init(params)
    chash = config_hash(model_cfg, cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.drpk") if out_dir else None
    csv_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    steps = cfg.steps_per_epoch or math.ceil(len(train_vols) / cfg.batch_size)
    horizon = max(cfg.epochs - 1, 1) if cfg.epochs > 1 else 1
    rows = []
    last_good: Optional[str] = None
    for epoch in range(cfg.epochs):
        lr = cosine_schedule(epoch, horizon, cfg.warmup_epochs, cfg.lr_start, cfg.lr_final) \
            if cfg.epochs > 1 else cfg.lr_start
        wd = cosine_schedule(epoch, horizon, 0, cfg.wd_start, cfg.wd_final) \
            if cfg.epochs > 1 else cfg.wd_start
        tau = tau_schedule(epoch, cfg.epochs, cfg.tau_lo, cfg.tau_hi)
        order = _epoch_order(len(train_vols), steps, cfg.batch_size,
                             Rng(cfg.seed).spawn(10, epoch))
        epoch_loss = 0.0
        for step in range(steps):
            model.zero_grad()
            batch_loss = 0.0
            for bi in range(cfg.batch_size):
                item = order[step * cfg.batch_size + bi]
                vol = train_vols[item]
                crop_rng = Rng(cfg.seed).spawn(20, epoch, step, bi)
                crop = vol
                if vol.extents[2] > cfg.crop_slices or vol.n_dirs > cfg.crop_dirs:
                    crop = sample_training_crop(vol, crop_rng,
                                                min(cfg.crop_slices, vol.extents[2]),
                                                min(cfg.crop_dirs, vol.n_dirs))
                gs = _eval_grid_shape(crop, model_cfg.patch)
                plan = make_mask(int(np.prod(gs)), crop.n_dirs, cfg.strategy, epoch,
                                 seed=int(Rng(cfg.seed).spawn(30, epoch, step, bi).next_u64()))
                with nd.Tape() as tape:
                    recon = mae_forward(model, crop, plan)
                    loss, _, _ = mae_loss(recon, crop.signal.astype(model_cfg.np_dtype),
                                          plan, tau, gs, model_cfg.patch)
                    loss = nd.mul_scalar(loss, 1.0 / cfg.batch_size)
                    tape.backward(loss)
                batch_loss += loss.item() * cfg.batch_size
            batch_loss /= cfg.batch_size
            if not math.isfinite(batch_loss):
                if ckpt_path and last_good:
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch}, step {step}; "
                        f"last good checkpoint: {last_good}", last_good)
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, step {step}")
            adamw_step(params, state, lr, wd, (cfg.beta1, cfg.beta2), cfg.eps)
            epoch_loss += batch_loss
        epoch_loss /= steps

        val_psnr = float("nan")
        if val_vols:
            vol = val_vols[0]
            gs = _eval_grid_shape(vol, model_cfg.patch)
            plan = make_mask(int(np.prod(gs)), vol.n_dirs, cfg.strategy, epoch,
                             seed=Rng(cfg.seed).spawn(40).next_u64())
            val_psnr = masked_psnr(model, vol, plan, gs)
        rows.append({"epoch": epoch, "loss": epoch_loss, "psnr_masked": val_psnr,
                     "lr": lr, "wd": wd, "tau": tau})
        if log:
            log(f"epoch {epoch:3d}  loss {epoch_loss:.6f}  psnr_masked {val_psnr:7.3f}  "
                f"lr {lr:.2e}  wd {wd:.3f}  tau {tau:.3f}")
        if ckpt_path:
            save_checkpoint(ckpt_path, model, state, epoch, chash)
            last_good = ckpt_path

    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "loss", "psnr_masked",
                                                   "lr", "wd", "tau"])
            writer.writeheader()
            writer.writerows(rows)
    return model, rows


def load_config_file(path) -> dict:
    """Flat ``key = value`` text config; '#' starts a comment."""
    out: dict = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    return out


def apply_config(values: dict, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    """Route flat config keys onto whichever dataclass declares them."""
    model_fields = {f.name: f for f in fields(ModelConfig)}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    for key, raw in values.items():
        if key in model_fields:
            target, fld = model_cfg, model_fields[key]
        elif key in train_fields:
            target, fld = train_cfg, train_fields[key]
        else:
            raise ValueError(f"unknown config key {key!r}")
        setattr(target, fld.name, _coerce(raw, fld.type, getattr(target, fld.name)))
    model_cfg.__post_init__()
    train_cfg.__post_init__()


def _coerce(raw: str, annotation, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(tok) for tok in raw.replace(",", " ").split())
    return raw
