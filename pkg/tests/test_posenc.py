"""Absolute positional codes: sinusoidal bands and the learnable map."""

import math

import numpy as np
import pytest

from dropemae import ndtensor as nd
from dropemae.dspace import SphericalCoord
from dropemae.posenc import (DiffusionPEParams, SpatialIndex, diffusion_pe,
                             sinusoidal_3d, sinusoidal_table, spatial_code)
from dropemae.rng import Rng
from test_ndtensor import check_op_grads


def test_origin_gives_zero_sin_one_cos():
    code = sinusoidal_3d(SpatialIndex(0, 0, 0), 12).data
    assert np.array_equal(code[0::2], np.zeros(6))
    assert np.array_equal(code[1::2], np.ones(6))


def test_band_separation():
    a = sinusoidal_3d(SpatialIndex(2, 5, 1), 18).data
    b = sinusoidal_3d(SpatialIndex(2, 5, 3), 18).data
    band = 6
    assert np.array_equal(a[:2 * band], b[:2 * band])  # x and y bands agree
    assert not np.array_equal(a[2 * band:], b[2 * band:])  # z band differs


def test_x_band_derived_values():
    code = sinusoidal_3d(SpatialIndex(1, 0, 0), 6).data
    assert abs(code[0] - math.sin(1.0)) < 1e-15
    assert abs(code[1] - math.cos(1.0)) < 1e-15
    assert np.allclose(code[:2], [0.841471, 0.540302], atol=1e-6)


def test_rejects_indivisible_width():
    with pytest.raises(ValueError):
        sinusoidal_3d(SpatialIndex(0, 0, 0), 8)
    with pytest.raises(ValueError):
        sinusoidal_table(np.zeros((1, 3), dtype=int), 32)


def test_table_matches_single_calls():
    idx = np.array([[0, 0, 0], [1, 2, 3], [4, 0, 7]])
    table = sinusoidal_table(idx, 12)
    for r, (ix, iy, iz) in enumerate(idx):
        assert np.allclose(table[r], sinusoidal_3d(SpatialIndex(ix, iy, iz), 12).data,
                           atol=1e-15)


def test_spatial_code_pads_indivisible_half():
    # d=64 gives d_half=32: 30 sinusoidal entries plus a zero tail
    idx = np.array([[3, 1, 2]])
    code = spatial_code(idx, 32)
    assert code.shape == (1, 32)
    assert np.array_equal(code[0, 30:], np.zeros(2))
    assert np.allclose(code[0, :30], sinusoidal_table(idx, 30)[0], atol=1e-15)
    with pytest.raises(ValueError):
        spatial_code(idx, 4)


def test_spatial_index_validation():
    with pytest.raises(ValueError):
        SpatialIndex(-1, 0, 0)


def test_diffusion_pe_zero_params():
    params = DiffusionPEParams(w=nd.tensor(np.zeros((8, 3)), requires_grad=True),
                               b=nd.tensor(np.zeros(8), requires_grad=True))
    out = diffusion_pe(SphericalCoord(1.0, math.pi / 2, 0.0), params.w, params.b)
    assert np.array_equal(out.data, np.zeros(8))


def test_diffusion_pe_identity_rows():
    w = np.zeros((8, 3))
    w[:3, :3] = np.eye(3)
    out = diffusion_pe(SphericalCoord(1.0, math.pi / 2, 0.0),
                       nd.constant(w), nd.constant(np.zeros(8)))
    assert np.allclose(out.data[:3], [1.0, math.pi / 2, 0.0], atol=1e-15)
    assert np.array_equal(out.data[3:], np.zeros(5))


def test_diffusion_pe_gradients():
    rng = np.random.default_rng(0)
    coords = rng.normal(size=(4, 3))
    check_op_grads(lambda w, b: diffusion_pe(coords, w, b),
                   [rng.normal(size=(5, 3)), rng.normal(size=5)])


def test_diffusion_pe_batch_shape():
    coords = np.zeros((7, 3))
    out = diffusion_pe(coords, nd.constant(np.ones((6, 3))), nd.constant(np.zeros(6)))
    assert out.shape == (7, 6)


def test_full_pe_has_length_d():
    # concatenation of the two halves has length d and only the diffusion
    # half carries parameters
    from dropemae.posenc import AbsolutePE
    d = 24
    idx = np.array([[1, 1, 1]])
    spat = spatial_code(idx, d // 2)
    params = DiffusionPEParams.init(d // 2, Rng(0))
    diff = diffusion_pe(np.array([0.5, 1.0, -0.5]), params.w, params.b)
    pe = AbsolutePE(spatial=nd.constant(spat[0]), diffusion=diff)
    full = pe.full()
    assert full.shape == (d,)
    assert np.array_equal(full.data[:d // 2], spat[0])
    assert np.array_equal(full.data[d // 2:], diff.data)


def test_init_bound_is_fan_in():
    params = DiffusionPEParams.init(64, Rng(1))
    assert np.all(np.abs(params.w.data) <= 1.0 / math.sqrt(3.0))
    assert np.array_equal(params.b.data, np.zeros(64))
