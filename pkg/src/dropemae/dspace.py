"""Geometry of the diffusion acquisition space.

Each diffusion-weighted volume is indexed by a point (b, v): a non-negative
b-value (s/mm^2) and a unit gradient direction. The distance between two
points combines a scaled b-value difference with the arc angle between the
directions, folded through |dot| so that v and -v coincide (opposite
gradient polarities encode the same diffusion measurement):

    D(p, q) = sqrt(gamma * ((b_p - b_q) / b_scale)^2 + arccos^2(|v_p . v_q|))

``b_scale`` keeps the b-value term O(1) against the angular term (raw
s/mm^2 differences are in the thousands); ``gamma`` weights the two terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd

__all__ = [
    "BVector", "DiffusionPoint", "SphericalCoord", "DistanceParams",
    "drope_distance", "to_spherical", "spherical_to_unit",
    "pairwise_distance_matrix",
]

_NORM_TOL = 1e-9


@dataclass(frozen=True)
class BVector:
    """Unit gradient direction; the constructor normalizes its input."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if any(not math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError("b-vector components must be finite")
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if n < 1e-12:
            raise ValueError("zero b-vector has no direction")
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def dot(self, other: "BVector") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z


@dataclass(frozen=True)
class DiffusionPoint:
    """One acquisition: b-value in s/mm^2 plus unit direction."""

    b: float
    dir: BVector

    def __post_init__(self):
        if not math.isfinite(self.b) or self.b < 0:
            raise ValueError(f"b-value must be finite and non-negative, got {self.b}")

    @property
    def is_reference(self) -> bool:
        """b = 0 volumes are normalization references, never tokens."""
        return self.b == 0.0


@dataclass(frozen=True)
class SphericalCoord:
    """(rho, theta, phi): normalized radius, polar angle, azimuth."""

    rho: float
    theta: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.theta, self.phi])


@dataclass(frozen=True)
class DistanceParams:
    """gamma weights the b-value term; b_scale divides b before differencing."""

    gamma: float = 1.0
    b_scale: float = 1000.0

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not math.isfinite(self.b_scale) or self.b_scale <= 0:
            raise ValueError(f"b_scale must be positive, got {self.b_scale}")


def drope_distance(p: DiffusionPoint, q: DiffusionPoint, params: DistanceParams) -> float:
    """Distance between two acquisition points; zero iff same shell and
    parallel or antiparallel directions."""
    if p.b <= 0 or q.b <= 0:
        raise ValueError("distance is defined for diffusion-weighted points (b > 0)")
    db = (p.b - q.b) / params.b_scale
    # |dot| can exceed 1 by float error; clamp before arccos
    c = min(abs(p.dir.dot(q.dir)), 1.0)
    ang = math.acos(c)
    return math.sqrt(params.gamma * db * db + ang * ang)


def to_spherical(p: DiffusionPoint, b_max: float) -> SphericalCoord:
    """Spherical coordinates of an acquisition point, radius scaled by b_max."""
    if not math.isfinite(b_max) or b_max <= 0:
        raise ValueError(f"b_max must be positive, got {b_max}")
    if p.b <= 0 or p.b > b_max:
        raise ValueError(f"need 0 < b <= b_max, got b={p.b}, b_max={b_max}")
    theta = math.acos(max(-1.0, min(1.0, p.dir.z)))
    phi = math.atan2(p.dir.y, p.dir.x)
    if phi == math.pi:  # keep phi in [-pi, pi)
        phi = -math.pi
    return SphericalCoord(rho=p.b / b_max, theta=theta, phi=phi)


def spherical_to_unit(theta: float, phi: float) -> BVector:
    """Unit vector for polar/azimuth angles; inverse of to_spherical's angles."""
    st = math.sin(theta)
    return BVector(st * math.cos(phi), st * math.sin(phi), math.cos(theta))


def pairwise_distance_matrix(points, params: DistanceParams) -> nd.Tensor:
    """Symmetric (Nd, Nd) matrix of distances over diffusion-weighted points.

    Accepts a sequence of DiffusionPoint or a GradientTable-like object with
    a ``points`` attribute. Computed once per forward and shared read-only.
    """
    pts = list(getattr(points, "points", points))
    if not pts:
        raise ValueError("need at least one diffusion-weighted point")
    if any(p.is_reference for p in pts):
        raise ValueError("b=0 reference volumes carry no distance metadata")
    n = len(pts)
    b = np.array([p.b for p in pts]) / params.b_scale
    v = np.stack([p.dir.as_array() for p in pts])
    dots = np.clip(np.abs(v @ v.T), 0.0, 1.0)
    ang = np.arccos(dots)
    np.fill_diagonal(ang, 0.0)
    db = b[:, None] - b[None, :]
    mat = np.sqrt(params.gamma * db * db + ang * ang)
    mat = 0.5 * (mat + mat.T)  # exact symmetry regardless of summation order
    np.fill_diagonal(mat, 0.0)
    return nd.constant(mat)
