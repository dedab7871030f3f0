"""Masking contracts, forward shapes, loss blending, and learnability."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dropemae import ndtensor as nd
from dropemae.dmri_io import (PhantomSpec, default_region_layout,
                              generate_phantom)
from dropemae.mae import (MAEModel, MaskPlan, ModelConfig, LossWeights,
                          encode_cls, make_mask, mae_forward, mae_loss,
                          sample_training_crop, tau_schedule, voxel_mask)
from dropemae.rng import Rng
from conftest import assert_grads_close


def tiny_config(**kw):
    base = dict(d_model=16, n_heads=2, n_encoder=2, n_decoder=1, patch=(4, 4, 2),
                conv_channels=2, mlp_ratio=2, b_max=2000.0, b_scale=1000.0)
    base.update(kw)
    return ModelConfig(**base)


def phantom(extents=(8, 8, 4), dirs=4, shells=(1000.0,), noise=0.0, seed=0):
    tensors, boxes = default_region_layout(extents)
    spec = PhantomSpec(extents=extents, region_tensors=tensors, region_boxes=boxes,
                       shells=shells, dirs_per_shell=dirs, noise_sigma=noise, seed=seed)
    return generate_phantom(spec)[0]


# ----------------------------------------------------------------- masks

def test_spatial_mask_counts():
    plan = make_mask(8, 4, "spatial", epoch=0, seed=1)
    assert plan.strategy == "spatial"
    assert len(plan.masked_spatial) == 6  # round(0.75 * 8)
    per_dir = plan.mask.sum(axis=0)
    assert np.all(per_dir == 6)
    # same spatial set across directions
    assert np.all(plan.mask[list(plan.masked_spatial), :])


def test_diffusion_mask_counts():
    plan = make_mask(8, 4, "diffusion", epoch=0, seed=1)
    assert plan.strategy == "diffusion"
    assert len(plan.masked_dirs) == 2  # round(0.5 * 4)
    fully = plan.mask.all(axis=0)
    assert fully.sum() == 2
    assert not plan.mask[:, list(plan.visible_dirs)].any()


def test_alternating_switches_by_epoch():
    a = make_mask(8, 4, "alternating", epoch=0, seed=9)
    b = make_mask(8, 4, "alternating", epoch=1, seed=9)
    c = make_mask(8, 4, "alternating", epoch=2, seed=9)
    assert a.strategy == "spatial" and b.strategy == "diffusion" and c.strategy == "spatial"


def test_mask_determinism():
    a = make_mask(16, 6, "spatial", epoch=3, seed=42)
    b = make_mask(16, 6, "spatial", epoch=3, seed=42)
    assert np.array_equal(a.mask, b.mask)
    c = make_mask(16, 6, "spatial", epoch=4, seed=42)
    assert not np.array_equal(a.mask, c.mask)


def test_mask_rejects_zero_visible():
    with pytest.raises(ValueError):
        make_mask(1, 4, "spatial", epoch=0, seed=0)
    with pytest.raises(ValueError):
        make_mask(8, 1, "diffusion", epoch=0, seed=0)
    with pytest.raises(ValueError):
        make_mask(8, 4, "sideways", epoch=0, seed=0)


@settings(max_examples=60)
@given(st.integers(2, 64), st.integers(1, 40), st.integers(0, 2**31 - 1),
       st.integers(0, 5))
def test_mask_count_exactness_property(s, ndirs, seed, epoch):
    expect_spatial = int(math.floor(0.75 * s + 0.5))
    if expect_spatial < s:
        plan = make_mask(s, ndirs, "spatial", epoch, seed)
        assert plan.mask.sum() == expect_spatial * ndirs
        assert np.all(plan.mask.sum(axis=0) == expect_spatial)
    expect_diff = int(math.floor(0.5 * ndirs + 0.5))
    if expect_diff < ndirs:
        plan = make_mask(s, ndirs, "diffusion", epoch, seed)
        assert np.all(plan.mask.sum(axis=1) == expect_diff)
        assert set(plan.masked_dirs) == set(np.where(plan.mask.all(axis=0))[0])


# ------------------------------------------------------------------- tau

def test_tau_endpoints_and_linearity():
    assert tau_schedule(0, 300) == 0.05
    assert tau_schedule(299, 300) == 0.95
    taus = [tau_schedule(e, 300) for e in range(300)]
    diffs = np.diff(taus)
    assert np.allclose(diffs, diffs[0], atol=1e-12)
    lw = LossWeights()
    assert lw.tau(0, 10) == 0.05 and lw.tau(9, 10) == 0.95


def test_tau_bounds_checked():
    with pytest.raises(ValueError):
        tau_schedule(5, 5)
    with pytest.raises(ValueError):
        tau_schedule(0, 0)


# ----------------------------------------------------------------- model

def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=15, n_heads=3)  # not divisible by heads
    with pytest.raises(ValueError):
        ModelConfig(d_model=12, n_heads=4)  # per-head dim 3 is odd
    ModelConfig(d_model=24, n_heads=3)


def test_forward_output_shape_16_16_8_4():
    vol = phantom((16, 16, 8), dirs=4)
    model = MAEModel(tiny_config(patch=(8, 8, 4)), seed=0)
    plan = make_mask(8, 4, "spatial", 0, seed=5)
    recon = mae_forward(model, vol, plan)
    assert recon.shape == vol.signal.shape


def test_forward_with_empty_mask():
    vol = phantom((8, 8, 4), dirs=4)
    model = MAEModel(tiny_config(), seed=0)
    plan = MaskPlan.empty(8, 4)
    recon = mae_forward(model, vol, plan)
    assert recon.shape == vol.signal.shape


def test_forward_diffusion_mask_shape():
    vol = phantom((8, 8, 4), dirs=6)
    model = MAEModel(tiny_config(), seed=1)
    plan = make_mask(8, 6, "diffusion", 1, seed=5)
    recon = mae_forward(model, vol, plan)
    assert recon.shape == vol.signal.shape


def test_forward_rejects_plan_mismatch():
    vol = phantom((8, 8, 4), dirs=4)
    model = MAEModel(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        mae_forward(model, vol, make_mask(16, 4, "spatial", 0, seed=1))


def test_mask_token_receives_gradient():
    vol = phantom((8, 8, 4), dirs=4)
    model = MAEModel(tiny_config(), seed=0)
    plan = make_mask(8, 4, "spatial", 0, seed=2)
    gs = (2, 2, 2)
    with nd.Tape() as tape:
        recon = mae_forward(model, vol, plan)
        loss, _, _ = mae_loss(recon, vol.signal, plan, 0.5, gs, model.config.patch)
        tape.backward(loss)
    assert model.mask_token.grad is not None
    assert np.any(model.mask_token.grad != 0.0)

    # finite-difference sign check on one mask-token coordinate
    def loss_at(delta):
        model.mask_token.data[0] += delta
        out = mae_forward(model, vol, plan)
        val, _, _ = mae_loss(out, vol.signal, plan, 0.5, gs, model.config.patch)
        model.mask_token.data[0] -= delta
        return val.item()

    h = 1e-5
    numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
    assert_grads_close(np.array(model.mask_token.grad[0]), np.array(numeric))


def test_all_parameters_reachable_once():
    model = MAEModel(tiny_config(), seed=0)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("enc.1.") for n in names)
    assert "mask_token" in names and "conv.2.w" in names


# ------------------------------------------------------------------ loss

def test_loss_zero_on_perfect_reconstruction():
    vol = phantom((8, 8, 4), dirs=4)
    plan = make_mask(8, 4, "spatial", 0, seed=3)
    loss, lm, lu = mae_loss(nd.constant(vol.signal), vol.signal, plan, 0.3,
                            (2, 2, 2), (4, 4, 2))
    assert loss.item() == 0.0 and lm.item() == 0.0 and lu.item() == 0.0


def test_loss_linear_blend():
    # recon differing by +sqrt(2) on masked voxels and +sqrt(4)=2 on visible
    plan = make_mask(8, 4, "spatial", 0, seed=4)
    vm = voxel_mask(plan, (2, 2, 2), (4, 4, 2))
    target = np.zeros((8, 8, 4, 4))
    recon = np.where(vm, math.sqrt(4.0), math.sqrt(2.0))
    loss, lm, lu = mae_loss(nd.constant(recon), target, plan, 0.5, (2, 2, 2), (4, 4, 2))
    assert abs(lm.item() - 4.0) < 1e-12
    assert abs(lu.item() - 2.0) < 1e-12
    assert abs(loss.item() - 3.0) < 1e-12  # 0.5*2 + 0.5*4


def test_loss_partition_of_voxels():
    plan = make_mask(8, 6, "diffusion", 0, seed=6)
    vm = voxel_mask(plan, (2, 2, 2), (4, 4, 2))
    assert vm.shape == (8, 8, 4, 6)
    frac = vm.mean()
    assert abs(frac - 0.5) < 1e-12  # 3 of 6 directions hidden


def test_loss_rejects_empty_mask_plan():
    plan = MaskPlan.empty(8, 4)
    with pytest.raises(ValueError):
        mae_loss(nd.constant(np.zeros((8, 8, 4, 4))), np.zeros((8, 8, 4, 4)),
                 plan, 0.5, (2, 2, 2), (4, 4, 2))


def test_loss_shape_mismatch():
    plan = make_mask(8, 4, "spatial", 0, seed=1)
    with pytest.raises(nd.ShapeError):
        mae_loss(nd.constant(np.zeros((8, 8, 4, 4))), np.zeros((8, 8, 4, 3)),
                 plan, 0.5, (2, 2, 2), (4, 4, 2))


# ------------------------------------------------------------------ crop

def test_crop_shapes_and_table():
    vol = phantom((8, 8, 8), dirs=30)
    crop = sample_training_crop(vol, Rng(0))
    assert crop.signal.shape == (8, 8, 4, 15)
    assert len(crop.table.points) == 15
    # recover the slab start by matching the first selected column
    src = {id(p): i for i, p in enumerate(vol.table.points)}
    first = src[id(crop.table.points[0])]
    z0 = next(z for z in range(vol.extents[2] - 3)
              if np.array_equal(vol.signal[:, :, z:z + 4, first], crop.signal[..., 0]))
    # then every crop column must equal the source column of its table point
    for j, p in enumerate(crop.table.points):
        i = src[id(p)]
        assert np.array_equal(crop.signal[:, :, :, j], vol.signal[:, :, z0:z0 + 4, i])


def test_crop_deterministic_under_seed():
    vol = phantom((8, 8, 8), dirs=20)
    a = sample_training_crop(vol, Rng(7))
    b = sample_training_crop(vol, Rng(7))
    assert np.array_equal(a.signal, b.signal)
    assert a.table.points == b.table.points


def test_crop_rejects_small_volumes():
    vol = phantom((8, 8, 2), dirs=20)
    with pytest.raises(ValueError):
        sample_training_crop(vol, Rng(0))
    vol = phantom((8, 8, 8), dirs=5)
    with pytest.raises(ValueError):
        sample_training_crop(vol, Rng(0))


# --------------------------------------------------------------- encode

def test_encode_cls_shape_and_determinism():
    vol = phantom((8, 8, 4), dirs=5)
    model = MAEModel(tiny_config(), seed=2)
    a = encode_cls(model, vol)
    b = encode_cls(model, vol)
    assert a.shape == (16,)
    assert np.array_equal(a, b)


# --------------------------------------------------------------- overfit

@pytest.mark.slow
def test_overfit_single_crop_reduces_loss_90pct():
    from dropemae.trainkit import AdamState, adamw_step
    vol = phantom((8, 8, 4), dirs=6, noise=0.01, seed=9)
    cfg = tiny_config(d_model=32, n_heads=2, n_encoder=3, n_decoder=1)
    model = MAEModel(cfg, seed=3)
    params = model.parameters()
    state = AdamState.init(params)
    plan = make_mask(8, 6, "spatial", 0, seed=8)
    gs = (2, 2, 2)
    losses = []
    for step in range(300):
        model.zero_grad()
        with nd.Tape() as tape:
            recon = mae_forward(model, vol, plan)
            loss, _, _ = mae_loss(recon, vol.signal, plan, 0.5, gs, cfg.patch)
            tape.backward(loss)
        adamw_step(params, state, lr=3e-3, wd=0.0)
        losses.append(loss.item())
    assert losses[-1] <= 0.1 * losses[0], f"loss {losses[0]} -> {losses[-1]}"
