"""Absolute positional codes for the token grid.

Each token gets a code of length d built from two halves: a fixed 3D
sinusoidal code of the patch-grid index (d/2 entries, split evenly over the
x/y/z axes as interleaved sin/cos pairs) and a learnable linear map of the
acquisition point's spherical coordinates (rho, theta, phi) into the other
d/2 entries. The two halves are concatenated and the result is *added* to
the patch embedding.

The sinusoidal half is parameter-free; the spherical-coordinate map is the
only learnable part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .dspace import SphericalCoord
from .rng import Rng

__all__ = [
    "SpatialIndex", "AbsolutePE", "DiffusionPEParams",
    "sinusoidal_3d", "sinusoidal_table", "spatial_code", "diffusion_pe",
]


@dataclass(frozen=True)
class SpatialIndex:
    """Patch-grid index (not voxel index) of a token along x, y, z."""

    ix: int
    iy: int
    iz: int

    def __post_init__(self):
        if min(self.ix, self.iy, self.iz) < 0:
            raise ValueError(f"spatial indices must be non-negative: {self}")

    def as_tuple(self):
        return (self.ix, self.iy, self.iz)


@dataclass
class AbsolutePE:
    """The two code halves for one token; ``full()`` is their concatenation."""

    spatial: nd.Tensor
    diffusion: nd.Tensor

    def full(self) -> nd.Tensor:
        return nd.concat([self.spatial, self.diffusion], axis=0)


def _axis_band(index: int, band: int) -> np.ndarray:
    pairs = band // 2
    j = np.arange(pairs)
    omega = 10000.0 ** (-2.0 * j / band)
    out = np.empty(band)
    out[0::2] = np.sin(index * omega)
    out[1::2] = np.cos(index * omega)
    return out


def sinusoidal_3d(idx: SpatialIndex, d_half: int) -> nd.Tensor:
    """Fixed sinusoidal code of a 3D patch index.

    d_half must be divisible by 6: one band of d_half/3 entries per axis,
    each band interleaving sin/cos pairs at frequencies 10000^(-2j/band).
    """
    if d_half % 6 != 0 or d_half <= 0:
        raise ValueError(f"d_half must be a positive multiple of 6, got {d_half}")
    band = d_half // 3
    return nd.constant(np.concatenate([
        _axis_band(idx.ix, band),
        _axis_band(idx.iy, band),
        _axis_band(idx.iz, band),
    ]))


def sinusoidal_table(indices: np.ndarray, d_half: int) -> np.ndarray:
    """Vectorized sinusoidal codes for an (S, 3) array of patch indices."""
    if d_half % 6 != 0 or d_half <= 0:
        raise ValueError(f"d_half must be a positive multiple of 6, got {d_half}")
    band = d_half // 3
    pairs = band // 2
    omega = 10000.0 ** (-2.0 * np.arange(pairs) / band)
    out = np.empty((indices.shape[0], d_half))
    for axis in range(3):
        ang = indices[:, axis:axis + 1] * omega[None, :]
        out[:, axis * band + 0:(axis + 1) * band:2] = np.sin(ang)
        out[:, axis * band + 1:(axis + 1) * band:2] = np.cos(ang)
    return out


def spatial_code(indices: np.ndarray, d_half: int) -> np.ndarray:
    """Sinusoidal codes padded to an arbitrary even d_half.

    The strict sinusoidal layout needs d_half % 6 == 0; when a model width
    gives an indivisible half (e.g. d=64 -> d_half=32), the largest multiple
    of 6 gets the sinusoidal bands and the tail is zero (still deterministic
    and parameter-free).
    """
    usable = 6 * (d_half // 6)
    if usable == 0:
        raise ValueError(f"d_half={d_half} leaves no room for a 3-axis code")
    out = np.zeros((indices.shape[0], d_half))
    out[:, :usable] = sinusoidal_table(indices, usable)
    return out


@dataclass
class DiffusionPEParams:
    """Learnable linear map (rho, theta, phi) -> R^{d/2}."""

    w: nd.Tensor  # (d/2, 3)
    b: nd.Tensor  # (d/2,)

    @staticmethod
    def init(d_half: int, rng: Rng, dtype=np.float64) -> "DiffusionPEParams":
        # fan-in scaling over the 3 input coordinates
        bound = 1.0 / math.sqrt(3.0)
        w = (rng.uniform((d_half, 3)) * 2.0 - 1.0) * bound
        return DiffusionPEParams(
            w=nd.tensor(w.astype(dtype), requires_grad=True),
            b=nd.tensor(np.zeros(d_half, dtype=dtype), requires_grad=True),
        )

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def diffusion_pe(coord, w: nd.Tensor, b: nd.Tensor) -> nd.Tensor:
    """Apply the learnable map to one coordinate triple or a batch of them.

    ``coord`` is a SphericalCoord or an (..., 3) array; output has the
    leading shape of ``coord`` with a trailing d/2 axis (or just (d/2,) for
    a single coordinate). Differentiable in w and b.
    """
    if isinstance(coord, SphericalCoord):
        c = coord.as_array()[None, :]
        single = True
    else:
        c = np.asarray(coord, dtype=np.float64)
        single = c.ndim == 1
        c = np.atleast_2d(c)
    if c.shape[-1] != 3:
        raise nd.ShapeError(f"coordinates must have a trailing extent of 3, got {c.shape}")
    out = nd.linear(nd.constant(c, dtype=w.dtype), nd.transpose(w, (1, 0)), b)
    if single:
        out = nd.reshape(out, (w.shape[0],))
    return out
