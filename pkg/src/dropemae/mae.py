"""Masked-autoencoder pretraining model and its masking/loss machinery.

Masking comes in three strategies: spatial (75% of patch positions hidden,
the same positions across every volume), diffusion (50% of volumes hidden
entirely), and alternating (spatial on even epochs, diffusion on odd ones).
Both strategies keep the visible tokens a rectangular sub-grid, so the
encoder runs on visible tokens only, classic-MAE style. The decoder sees
the full grid with a learnable mask token (plus absolute positional code)
at hidden slots, and finishes with a per-volume stack of three 3x3x3
convolutions after un-patchifying token features back to voxel space.

The loss blends the masked and unmasked reconstruction errors,
(1 - tau) * mse_unmasked + tau * mse_masked, with tau ramped linearly over
epochs from 0.05 to 0.95.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ndtensor as nd
from .attn import (AttentionConfig, ClsHead, EncoderBlock, LayerNormParams,
                   LinearParams, TokenGrid, encoder_forward)
from .dmri_io import DWIVolumeSet, patchify, unpatchify_tokens
from .dspace import DistanceParams, pairwise_distance_matrix, to_spherical
from .posenc import DiffusionPEParams, diffusion_pe, spatial_code
from .rng import Rng
from .ndtensor import Tensor

__all__ = [
    "MaskPlan", "ModelConfig", "MAEModel", "LossWeights",
    "make_mask", "mae_forward", "mae_loss", "voxel_mask",
    "sample_training_crop", "tau_schedule", "encode_cls",
]

SPATIAL_MASK_RATIO = 0.75
DIFFUSION_MASK_RATIO = 0.5

_STRATEGIES = ("spatial", "diffusion", "alternating")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    """Boolean (S, Nd) mask (True = hidden) plus the sets that define it."""

    strategy: str  # effective strategy: "spatial" or "diffusion"
    mask: np.ndarray
    seed: int
    masked_spatial: tuple = ()
    masked_dirs: tuple = ()

    @property
    def n_spatial(self) -> int:
        return self.mask.shape[0]

    @property
    def n_dirs(self) -> int:
        return self.mask.shape[1]

    @property
    def visible_spatial(self) -> tuple:
        hidden = set(self.masked_spatial)
        return tuple(i for i in range(self.n_spatial) if i not in hidden)

    @property
    def visible_dirs(self) -> tuple:
        hidden = set(self.masked_dirs)
        return tuple(i for i in range(self.n_dirs) if i not in hidden)

    @staticmethod
    def empty(s: int, ndirs: int) -> "MaskPlan":
        """All-visible plan; test/evaluation convenience only."""
        return MaskPlan(strategy="spatial", mask=np.zeros((s, ndirs), dtype=bool), seed=0)


def make_mask(s: int, ndirs: int, strategy: str, epoch: int, seed: int) -> MaskPlan:
    """Draw the epoch's mask; deterministic in (seed, epoch, strategy)."""
    if s < 1 or ndirs < 1:
        raise ValueError("mask needs S >= 1 and Nd >= 1")
    if strategy not in _STRATEGIES:
        raise ValueError(f"unknown masking strategy {strategy!r}")
    effective = strategy
    if strategy == "alternating":
        effective = "spatial" if epoch % 2 == 0 else "diffusion"
    rng = Rng(seed).spawn(epoch, 0 if effective == "spatial" else 1)
    mask = np.zeros((s, ndirs), dtype=bool)
    if effective == "spatial":
        k = _round_half_up(SPATIAL_MASK_RATIO * s)
        if k >= s:
            raise ValueError(f"spatial masking of S={s} leaves no visible token")
        chosen = np.sort(rng.choice(s, k))
        mask[chosen, :] = True
        return MaskPlan(effective, mask, seed, masked_spatial=tuple(int(i) for i in chosen))
    k = _round_half_up(DIFFUSION_MASK_RATIO * ndirs)
    if k >= ndirs:
        raise ValueError(f"diffusion masking of Nd={ndirs} leaves no visible volume")
    chosen = np.sort(rng.choice(ndirs, k))
    mask[:, chosen] = True
    return MaskPlan(effective, mask, seed, masked_dirs=tuple(int(i) for i in chosen))


@dataclass(frozen=True)
class LossWeights:
    """Masked-term weight; linear in the epoch index from lo to hi."""

    lo: float = 0.05
    hi: float = 0.95

    def tau(self, epoch: int, total_epochs: int) -> float:
        return tau_schedule(epoch, total_epochs, self.lo, self.hi)


def tau_schedule(epoch: int, total_epochs: int, lo: float = 0.05, hi: float = 0.95) -> float:
    """lo at epoch 0, hi at the final epoch, exactly linear between."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside a {total_epochs}-epoch run")
    if total_epochs == 1:
        return lo
    return lo + (hi - lo) * epoch / (total_epochs - 1)


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the full-scale setup,
    trimmed down via overrides for desk-scale runs."""

    d_model: int = 384
    n_heads: int = 3
    n_encoder: int = 10
    n_decoder: int = 3
    patch: tuple = (8, 8, 4)
    conv_channels: int = 8
    mlp_ratio: int = 4
    drope: bool = True  # relative rotary PE on the diffusion axis
    spatial_ordinal: bool = False  # ordinal rotary plugin on the spatial axis
    gamma: float = 1.0
    b_scale: float = 1000.0
    b_max: float = 3000.0
    dtype: str = "f8"  # "f8" tests/oracles, "f4" allowed for training speed

    def __post_init__(self):
        if self.d_model % 2 != 0 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} must be even and divisible by "
                             f"{self.n_heads} heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("per-head dimension must be even")
        if self.n_encoder < 1 or self.n_decoder < 1:
            raise ValueError("need at least one encoder and one decoder block")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f4" else np.float64

    @property
    def distance_params(self) -> DistanceParams:
        return DistanceParams(gamma=self.gamma, b_scale=self.b_scale)

    def block_config(self, index: int) -> AttentionConfig:
        # diffusion attention first, then spatial, alternating
        if index % 2 == 0:
            return AttentionConfig(self.d_model, self.n_heads, "diffusion",
                                   "drope" if self.drope else "none")
        return AttentionConfig(self.d_model, self.n_heads, "spatial",
                               "ordinal_rope" if self.spatial_ordinal else "none")


class MAEModel:
    """Parameter container for the full encoder/decoder stack."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        d = config.d_model
        dt = config.np_dtype
        p = int(np.prod(config.patch))
        c0 = config.conv_channels
        root = Rng(seed)
        self.patch_proj = LinearParams.init(p, d, root.spawn(1), dt)
        self.pe = DiffusionPEParams.init(d // 2, root.spawn(2), dt)
        self.enc_blocks = [EncoderBlock.init(config.block_config(i), root.spawn(3, i),
                                             config.mlp_ratio, dt)
                           for i in range(config.n_encoder)]
        self.cls_head = ClsHead.init(d, config.n_heads, root.spawn(4), dt)
        self.mask_token = nd.tensor(root.spawn(5).normal((d,), scale=0.02).astype(dt),
                                    requires_grad=True)
        self.dec_blocks = [EncoderBlock.init(config.block_config(i), root.spawn(6, i),
                                             config.mlp_ratio, dt)
                           for i in range(config.n_decoder)]
        self.ln_out = LayerNormParams.init(d, dt)
        self.voxel_proj = LinearParams.init(d, p * c0, root.spawn(7), dt)
        conv_rng = root.spawn(8)
        self.convs = []
        for li, (cin, cout) in enumerate([(c0, c0), (c0, c0), (c0, 1)]):
            bound = 1.0 / math.sqrt(cin * 27)
            w = (conv_rng.spawn(li).uniform((cout, cin, 3, 3, 3)) * 2.0 - 1.0) * bound
            self.convs.append((nd.tensor(w.astype(dt), requires_grad=True),
                               nd.tensor(np.zeros(cout, dtype=dt), requires_grad=True)))

    def named_parameters(self) -> Iterator:
        yield from self.patch_proj.named("patch_proj")
        yield from self.pe.named("pe")
        for i, blk in enumerate(self.enc_blocks):
            yield from blk.named(f"enc.{i}")
        yield from self.cls_head.named("cls")
        yield "mask_token", self.mask_token
        for i, blk in enumerate(self.dec_blocks):
            yield from blk.named(f"dec.{i}")
        yield from self.ln_out.named("ln_out")
        yield from self.voxel_proj.named("voxel_proj")
        for i, (w, b) in enumerate(self.convs):
            yield f"conv.{i}.w", w
            yield f"conv.{i}.b", b

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def absolute_pe(self, grid: TokenGrid) -> Tensor:
        """(S, Nd, d) positional code: fixed spatial half ++ learnable
        spherical-coordinate half, broadcast over the opposite axis."""
        d_half = self.config.d_model // 2
        spat = spatial_code(grid.spatial_indices, d_half).astype(self.config.np_dtype)
        coords = np.stack([to_spherical(p, self.config.b_max).as_array()
                           for p in grid.points])
        diff = diffusion_pe(coords, self.pe.w, self.pe.b)  # (Nd, d/2)
        s, ndirs = grid.n_spatial, grid.n_dirs
        return nd.concat([
            nd.tile_axis(nd.constant(spat, dtype=self.config.np_dtype), 1, ndirs),
            nd.tile_axis(diff, 0, s),
        ], axis=2)


def _subgrid(grid: TokenGrid, x: Tensor, plan: MaskPlan) -> TokenGrid:
    """Visible-token rectangle for the encoder pass."""
    if plan.strategy == "spatial" and plan.masked_spatial:
        vis = list(plan.visible_spatial)
        return TokenGrid(nd.gather(x, vis, axis=0), grid.spatial_indices[vis],
                         grid.grid_shape, grid.points, full_grid=False)
    if plan.strategy == "diffusion" and plan.masked_dirs:
        vis = list(plan.visible_dirs)
        return TokenGrid(nd.gather(x, vis, axis=1), grid.spatial_indices,
                         grid.grid_shape, [grid.points[i] for i in vis], full_grid=False)
    return grid.with_tokens(x)


def _scatter_with_mask_tokens(model: MAEModel, grid: TokenGrid, encoded: TokenGrid,
                              pe: Tensor, plan: MaskPlan) -> Tensor:
    """Rebuild the full (S, Nd, d) grid: encoded tokens at visible slots,
    mask token + positional code at hidden slots."""
    d = model.config.d_model
    if plan.strategy == "spatial" and plan.masked_spatial:
        vis, hid = list(plan.visible_spatial), list(plan.masked_spatial)
        fill = nd.add(nd.tile_axis(nd.tile_axis(model.mask_token, 0, grid.n_dirs), 0, len(hid)),
                      nd.gather(pe, hid, axis=0))
        combined = nd.concat([encoded.tokens, fill], axis=0)
        order = np.argsort(np.concatenate([vis, hid]))
        return nd.gather(combined, order, axis=0)
    if plan.strategy == "diffusion" and plan.masked_dirs:
        vis, hid = list(plan.visible_dirs), list(plan.masked_dirs)
        fill = nd.add(nd.tile_axis(nd.tile_axis(model.mask_token, 0, len(hid)), 0, grid.n_spatial),
                      nd.gather(pe, hid, axis=1))
        combined = nd.concat([encoded.tokens, fill], axis=1)
        order = np.argsort(np.concatenate([vis, hid]))
        return nd.gather(combined, order, axis=1)
    return encoded.tokens


def mae_forward(model: MAEModel, volume: DWIVolumeSet, plan: MaskPlan) -> Tensor:
    """Masked reconstruction of the full (Nx, Ny, Nz, Nd) signal."""
    cfg = model.config
    grid = patchify(volume, cfg.patch, model.patch_proj, cfg.np_dtype)
    if plan.mask.shape != (grid.n_spatial, grid.n_dirs):
        raise ValueError(f"mask plan {plan.mask.shape} does not match token grid "
                         f"({grid.n_spatial}, {grid.n_dirs})")
    pe = model.absolute_pe(grid)
    x = nd.add(grid.tokens, pe)
    dmat = pairwise_distance_matrix(grid.points, cfg.distance_params)

    visible = _subgrid(grid, x, plan)
    if visible.full_grid:
        dmat_vis = dmat
    elif plan.strategy == "diffusion":
        keep = list(plan.visible_dirs)
        dmat_vis = nd.constant(dmat.data[np.ix_(keep, keep)])
    else:
        dmat_vis = dmat
    encoded, _ = encoder_forward(visible, model.enc_blocks, dmat_vis)

    full_tokens = _scatter_with_mask_tokens(model, grid, encoded, pe, plan)
    dec_grid = grid.with_tokens(full_tokens)
    decoded, _ = encoder_forward(dec_grid, model.dec_blocks, dmat)

    feats = model.voxel_proj(model.ln_out(decoded.tokens))  # (S, Nd, P*C0)
    vox = unpatchify_tokens(feats, grid.grid_shape, cfg.patch, cfg.conv_channels)
    h = vox  # (Nd, C0, Nx, Ny, Nz)
    for li, (w, b) in enumerate(model.convs):
        h = nd.conv3d(h, w, b)
        if li < len(model.convs) - 1:
            h = nd.gelu(h)
    nx, ny, nz = volume.extents
    return nd.transpose(nd.reshape(h, (grid.n_dirs, nx, ny, nz)), (1, 2, 3, 0))


def voxel_mask(plan: MaskPlan, grid_shape, patch) -> np.ndarray:
    """Expand the (S, Nd) patch mask to voxel level (Nx, Ny, Nz, Nd)."""
    gx, gy, gz = grid_shape
    m = plan.mask.reshape(gx, gy, gz, plan.n_dirs)
    for axis, rep in enumerate(patch):
        m = np.repeat(m, rep, axis=axis)
    return m


def mae_loss(recon: Tensor, target: np.ndarray, plan: MaskPlan, tau: float,
             grid_shape, patch):
    """Blend of masked/unmasked MSE per the tau ramp.

    Returns (loss, mse_masked, mse_unmasked) as scalar tensors.
    """
    if recon.shape != tuple(np.shape(target)):
        raise nd.ShapeError(f"reconstruction {recon.shape} vs target {np.shape(target)}")
    vm = voxel_mask(plan, grid_shape, patch)
    if vm.shape != recon.shape:
        raise nd.ShapeError(f"mask expands to {vm.shape}, reconstruction is {recon.shape}")
    if not vm.any():
        raise ValueError("mask plan hides no voxels; the masked loss term is undefined")
    l_masked = nd.masked_mse(recon, target, vm)
    l_unmasked = nd.masked_mse(recon, target, ~vm)
    loss = nd.add(nd.mul_scalar(l_unmasked, 1.0 - tau), nd.mul_scalar(l_masked, tau))
    return loss, l_masked, l_unmasked


def sample_training_crop(volume: DWIVolumeSet, rng: Rng, n_slices: int = 4,
                         n_dirs: int = 15) -> DWIVolumeSet:
    """Slab of contiguous z-slices plus a direction subsample.

    Reduces memory and doubles as augmentation. The returned set carries
    the matching gradient-table subset.
    """
    nx, ny, nz = volume.extents
    if nz < n_slices:
        raise ValueError(f"volume has {nz} slices, crop needs {n_slices}")
    if volume.n_dirs < n_dirs:
        raise ValueError(f"volume has {volume.n_dirs} directions, crop needs {n_dirs}")
    z0 = rng.randint(nz - n_slices + 1)
    dirs = np.sort(rng.choice(volume.n_dirs, n_dirs))
    sig = np.ascontiguousarray(volume.signal[:, :, z0:z0 + n_slices, :][..., dirs])
    return DWIVolumeSet(signal=sig, table=volume.table.subset([int(i) for i in dirs]),
                        spacing=volume.spacing)


def encode_cls(model: MAEModel, volume: DWIVolumeSet) -> np.ndarray:
    """Frozen summary vector of a full volume (no masking, no gradients)."""
    cfg = model.config
    grid = patchify(volume, cfg.patch, model.patch_proj, cfg.np_dtype)
    x = nd.add(grid.tokens, model.absolute_pe(grid))
    dmat = pairwise_distance_matrix(grid.points, cfg.distance_params)
    _, cls = encoder_forward(grid.with_tokens(x), model.enc_blocks, dmat, model.cls_head)
    return cls.data.copy()
