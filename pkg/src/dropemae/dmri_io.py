"""Ingestion and synthesis of diffusion-weighted volumes.

Covers the uncompressed NIfTI-1 single-file format (348-byte header, data
at offset 352, either endianness), FSL-style bvals/bvecs text tables,
normalization of the raw signal by the b=0 reference, patchification into
tokens, and a synthetic phantom whose signal follows the single-tensor
attenuation model exp(-b v^T D v).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndtensor as nd
from .attn import LinearParams, TokenGrid
from .dspace import BVector, DiffusionPoint
from .rng import Rng

__all__ = [
    "NiftiError", "BadMagicError", "UnsupportedDatatypeError", "TruncatedFileError",
    "NiftiHeader", "GradientTable", "DWIVolumeSet", "PhantomSpec",
    "read_nifti", "write_nifti", "read_bvals_bvecs", "normalize_by_b0",
    "crop_to_patch_grid", "patchify", "patch_matrix", "unpatchify_array",
    "unpatchify_tokens",
    "generate_phantom", "load_phantom_spec", "tensor_attenuation",
    "B0_THRESHOLD", "CLIP_MAX",
]

B0_THRESHOLD = 50.0  # s/mm^2; below this a volume counts as a b=0 reference
CLIP_MAX = 2.0  # normalized attenuation is clipped to [0, CLIP_MAX]

_HDR_FMT = "i10s18sihBB8h3fhhhh8ffffhBBffffii80s24shh6f4f4f4f16s4s"
_HDR_SIZE = 348
_VOX_OFFSET = 352

# NIfTI-1 datatype codes
_DTYPES = {4: np.dtype(np.int16), 16: np.dtype(np.float32), 64: np.dtype(np.float64)}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Base error for NIfTI parsing/writing problems."""


class BadMagicError(NiftiError):
    """File is not a NIfTI-1 single-file image."""


class UnsupportedDatatypeError(NiftiError):
    """Datatype code outside {int16, float32, float64}."""


class TruncatedFileError(NiftiError):
    """Payload shorter than the header promises."""


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    byte_order: str  # "<" little, ">" big

    @property
    def rank(self) -> int:
        return self.dim[0]

    @property
    def shape(self) -> tuple:
        return tuple(self.dim[1:1 + self.rank])

    @property
    def spacing(self) -> tuple:
        return tuple(self.pixdim[1:4])


def read_nifti(path):
    """Read an uncompressed single-file .nii; returns (array, header).

    Endianness is decided by whichever byte order makes sizeof_hdr read as
    348. Data comes back in (x, y, z[, t]) axis order; when scl_slope is
    nonzero and not the identity scaling, the payload is mapped through
    slope * value + inter.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HDR_SIZE:
        raise TruncatedFileError(f"{path}: only {len(raw)} bytes, header needs {_HDR_SIZE}")
    order = None
    for cand in ("<", ">"):
        if struct.unpack_from(cand + "i", raw, 0)[0] == _HDR_SIZE:
            order = cand
            break
    if order is None:
        raise BadMagicError(f"{path}: sizeof_hdr is not 348 in either byte order")
    fields = struct.unpack_from(order + _HDR_FMT, raw, 0)
    dim = fields[7:15]
    datatype, bitpix = fields[19], fields[20]
    pixdim = fields[22:30]
    vox_offset, scl_slope, scl_inter = fields[30], fields[31], fields[32]
    magic = fields[-1]
    if magic[:3] == b"ni1":
        raise NiftiError(f"{path}: detached .hdr/.img pairs are not supported")
    if magic[:3] != b"n+1":
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"{path}: dim[0]={dim[0]} outside 1..7")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(order)
    if bitpix != dtype.itemsize * 8:
        raise NiftiError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    header = NiftiHeader(sizeof_hdr=_HDR_SIZE, dim=dim, datatype=datatype, bitpix=bitpix,
                         pixdim=pixdim, vox_offset=vox_offset, scl_slope=scl_slope,
                         scl_inter=scl_inter, magic=magic, byte_order=order)
    shape = header.shape
    count = int(np.prod(shape))
    start = int(vox_offset)
    need = count * dtype.itemsize
    if len(raw) - start < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - start} bytes, need {need}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    arr = arr.reshape(shape, order="F")
    arr = arr.astype(arr.dtype.newbyteorder("="))  # native order for downstream math
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        arr = arr.astype(np.float64) * scl_slope + scl_inter
    return arr, header


def write_nifti(array: np.ndarray, spacing, path) -> None:
    """Write a rank-3/4 array as little-endian single-file .nii (offset 352)."""
    array = np.asarray(array)
    if array.ndim not in (3, 4):
        raise NiftiError(f"can only write rank 3 or 4 arrays, got rank {array.ndim}")
    dtype = np.dtype(array.dtype).newbyteorder("=")
    if dtype not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {array.dtype}")
    code = _DTYPE_CODES[dtype]
    dim = [array.ndim] + list(array.shape) + [1] * (7 - array.ndim)
    pixdim = [1.0] + [float(s) for s in spacing[:3]] + [1.0] * 4
    fields = (
        _HDR_SIZE, b"", b"", 0, 0, 0, 0,
        *dim,
        0.0, 0.0, 0.0, 0,
        code, dtype.itemsize * 8, 0,
        *pixdim,
        float(_VOX_OFFSET), 0.0, 0.0,
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"dropemae", b"", 0, 0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        b"", b"n+1\0",
    )
    header = struct.pack("<" + _HDR_FMT, *fields)
    assert len(header) == _HDR_SIZE
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\0\0\0\0")  # no extensions
        f.write(np.ascontiguousarray(array, dtype=dtype.newbyteorder("<")).tobytes(order="F"))


@dataclass(frozen=True)
class GradientTable:
    """Diffusion-weighted points plus the source positions of b=0 volumes."""

    points: tuple  # DiffusionPoint per DWI volume, source order
    dwi_indices: tuple  # source volume index of each point
    b0_indices: tuple  # source volume indices of the b=0 references

    def __post_init__(self):
        if len(self.points) != len(self.dwi_indices):
            raise ValueError("points and dwi_indices length mismatch")

    @property
    def n_volumes(self) -> int:
        return len(self.points) + len(self.b0_indices)

    @property
    def n_dwi(self) -> int:
        return len(self.points)

    @property
    def max_b(self) -> float:
        return max(p.b for p in self.points) if self.points else 0.0

    def subset(self, positions: Sequence[int]) -> "GradientTable":
        """Table over a selection of DWI positions (not source indices)."""
        pts = tuple(self.points[i] for i in positions)
        return GradientTable(points=pts, dwi_indices=tuple(range(len(pts))), b0_indices=())

    @staticmethod
    def from_points(points) -> "GradientTable":
        pts = tuple(points)
        return GradientTable(points=pts, dwi_indices=tuple(range(len(pts))), b0_indices=())


def _parse_floats(path) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError as e:
                raise ValueError(f"{path}: non-numeric token in {line!r}") from e
    return rows


def read_bvals_bvecs(bvals_path, bvecs_path) -> GradientTable:
    """Parse FSL-convention text tables into a GradientTable.

    bvals is one whitespace-separated row of N values; bvecs is three rows
    (x, y, z) of N values. Volumes with b < 50 s/mm^2 are b=0 references;
    the rest must have a nonzero direction, which is normalized.
    """
    bval_rows = _parse_floats(bvals_path)
    bvals = [v for row in bval_rows for v in row]
    bvec_rows = _parse_floats(bvecs_path)
    if len(bvec_rows) != 3:
        raise ValueError(f"{bvecs_path}: expected 3 rows (x, y, z), got {len(bvec_rows)}")
    n = len(bvals)
    if any(len(row) != n for row in bvec_rows):
        raise ValueError(f"count mismatch: {n} b-values vs bvec rows of "
                         f"{[len(r) for r in bvec_rows]} entries")
    points, dwi_idx, b0_idx = [], [], []
    for i in range(n):
        b = bvals[i]
        vec = (bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i])
        if b < B0_THRESHOLD:
            b0_idx.append(i)
            continue
        if math.sqrt(sum(c * c for c in vec)) < 1e-6:
            raise ValueError(f"volume {i}: b={b} but direction is zero")
        points.append(DiffusionPoint(b=b, dir=BVector(*vec)))
        dwi_idx.append(i)
    return GradientTable(points=tuple(points), dwi_indices=tuple(dwi_idx),
                         b0_indices=tuple(b0_idx))


@dataclass
class DWIVolumeSet:
    """Normalized attenuations (Nx, Ny, Nz, Nd) with their gradient table."""

    signal: np.ndarray
    table: GradientTable
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.signal.ndim != 4:
            raise ValueError(f"signal must be 4D, got shape {self.signal.shape}")
        if self.signal.shape[3] != self.table.n_dwi:
            raise ValueError(f"{self.signal.shape[3]} volumes vs {self.table.n_dwi} table points")
        lo, hi = float(self.signal.min()), float(self.signal.max())
        if lo < 0.0 or hi > CLIP_MAX + 1e-12:
            raise ValueError(f"normalized signal out of [0, {CLIP_MAX}]: range [{lo}, {hi}]")

    @property
    def extents(self) -> tuple:
        return self.signal.shape[:3]

    @property
    def n_dirs(self) -> int:
        return self.signal.shape[3]


def normalize_by_b0(raw: np.ndarray, table: GradientTable, spacing=(1.0, 1.0, 1.0),
                    eps: float = 1e-6) -> DWIVolumeSet:
    """Divide by the voxelwise mean b=0 volume and clip outliers to [0, 2]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[3] != table.n_volumes:
        raise ValueError(f"raw shape {raw.shape} does not match table with "
                         f"{table.n_volumes} volumes")
    if not table.b0_indices:
        raise ValueError("normalization requires at least one b=0 volume")
    s0 = raw[..., list(table.b0_indices)].mean(axis=3)
    dwi = raw[..., list(table.dwi_indices)]
    good = s0 > eps
    att = np.zeros_like(dwi)
    np.divide(dwi, s0[..., None], out=att, where=good[..., None])
    att = np.clip(att, 0.0, CLIP_MAX)
    return DWIVolumeSet(signal=att, table=GradientTable.from_points(table.points),
                        spacing=tuple(spacing))


def _grid_shape(extents, patch) -> tuple:
    gs = []
    for n, p in zip(extents, patch):
        if p <= 0 or n % p != 0:
            raise ValueError(f"extents {tuple(extents)} not divisible by patch {tuple(patch)}")
        gs.append(n // p)
    return tuple(gs)


def patch_matrix(vol: DWIVolumeSet, patch) -> np.ndarray:
    """Flattened patches, shape (S, Nd, Px*Py*Pz); x-major patch order."""
    gx, gy, gz = _grid_shape(vol.extents, patch)
    px, py, pz = patch
    ndirs = vol.n_dirs
    a = vol.signal.reshape(gx, px, gy, py, gz, pz, ndirs)
    a = a.transpose(0, 2, 4, 6, 1, 3, 5)  # (gx, gy, gz, Nd, px, py, pz)
    return np.ascontiguousarray(a.reshape(gx * gy * gz, ndirs, px * py * pz))


def spatial_index_table(grid_shape) -> np.ndarray:
    """(S, 3) patch indices in the same x-major order as patch_matrix."""
    gx, gy, gz = grid_shape
    ix, iy, iz = np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij")
    return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)


def crop_to_patch_grid(vol: DWIVolumeSet, patch) -> DWIVolumeSet:
    """Trim trailing voxels so every extent divides its patch extent.

    Patchification rejects indivisible extents; command-line entry points
    crop instead so arbitrary volumes remain usable.
    """
    target = tuple((n // p) * p for n, p in zip(vol.extents, patch))
    if any(t == 0 for t in target):
        raise ValueError(f"extents {vol.extents} smaller than one patch {tuple(patch)}")
    if target == vol.extents:
        return vol
    nx, ny, nz = target
    return DWIVolumeSet(signal=np.ascontiguousarray(vol.signal[:nx, :ny, :nz, :]),
                        table=vol.table, spacing=vol.spacing)


def patchify(vol: DWIVolumeSet, patch, proj: LinearParams, dtype=np.float64) -> TokenGrid:
    """Cut the volume into (Px, Py, Pz) blocks and project each to a token."""
    grid_shape = _grid_shape(vol.extents, patch)
    patches = nd.constant(patch_matrix(vol, patch), dtype=dtype)
    tokens = proj(patches)
    return TokenGrid(tokens=tokens, spatial_indices=spatial_index_table(grid_shape),
                     grid_shape=grid_shape, points=list(vol.table.points))


def unpatchify_array(patches: np.ndarray, grid_shape, patch) -> np.ndarray:
    """Inverse of patch_matrix: (S, Nd, P) -> (Nx, Ny, Nz, Nd)."""
    gx, gy, gz = grid_shape
    px, py, pz = patch
    ndirs = patches.shape[1]
    a = patches.reshape(gx, gy, gz, ndirs, px, py, pz)
    a = a.transpose(0, 4, 1, 5, 2, 6, 3)
    return np.ascontiguousarray(a.reshape(gx * px, gy * py, gz * pz, ndirs))


def unpatchify_tokens(tokens: nd.Tensor, grid_shape, patch, channels: int) -> nd.Tensor:
    """Differentiable (S, Nd, C*P) -> (Nd, C, Nx, Ny, Nz) reassembly.

    Token feature layout is (C, Px, Py, Pz), C-order.
    """
    gx, gy, gz = grid_shape
    px, py, pz = patch
    ndirs = tokens.shape[1]
    t = nd.reshape(tokens, (gx, gy, gz, ndirs, channels, px, py, pz))
    t = nd.transpose(t, (3, 4, 0, 5, 1, 6, 2, 7))
    return nd.reshape(t, (ndirs, channels, gx * px, gy * py, gz * pz))


@dataclass
class PhantomSpec:
    """Blueprint for a synthetic piecewise-tensor volume.

    ``region_boxes`` are half-open voxel boxes (x0, x1, y0, y1, z0, z1)
    painted in order over a background of ``region_tensors[0]`` (whose box
    should cover the full extent). Tensors are in mm^2/s.
    """

    extents: tuple
    region_tensors: list
    region_boxes: list
    shells: tuple = (1000.0,)
    dirs_per_shell: int = 15
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.region_tensors) != len(self.region_boxes):
            raise ValueError("one box per region tensor required")
        for t in self.region_tensors:
            t = np.asarray(t, dtype=np.float64)
            if t.shape != (3, 3) or not np.allclose(t, t.T, atol=1e-12):
                raise ValueError("region tensors must be symmetric 3x3")
            if np.linalg.eigvalsh(t).min() <= 0:
                raise ValueError("region tensors must be positive definite")

    def label_map(self) -> np.ndarray:
        lab = np.zeros(self.extents, dtype=np.int64)
        for k, (x0, x1, y0, y1, z0, z1) in enumerate(self.region_boxes):
            lab[x0:x1, y0:y1, z0:z1] = k
        return lab


def load_phantom_spec(path) -> PhantomSpec:
    """Parse a phantom blueprint from flat ``key = value`` text.

    Scalar keys: extents, shells, dirs_per_shell, noise_sigma, seed. Each
    ``region`` line adds one compartment:

        region = box x0,x1,y0,y1,z0,z1 tensor_diag dxx,dyy,dzz
        region = box x0,x1,y0,y1,z0,z1 tensor dxx,dyy,dzz,dxy,dxz,dyz

    The first region should cover the full extents (the background).
    """
    extents = None
    shells = (1000.0,)
    dirs_per_shell = 15
    noise_sigma = 0.0
    seed = 0
    tensors, boxes = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key == "extents":
                extents = tuple(int(t) for t in val.replace(",", " ").split())
            elif key == "shells":
                shells = tuple(float(t) for t in val.replace(",", " ").split())
            elif key == "dirs_per_shell":
                dirs_per_shell = int(val)
            elif key == "noise_sigma":
                noise_sigma = float(val)
            elif key == "seed":
                seed = int(val)
            elif key == "region":
                toks = val.split()
                if len(toks) != 4 or toks[0] != "box" or toks[2] not in ("tensor", "tensor_diag"):
                    raise ValueError(f"{path}:{ln}: malformed region line {val!r}")
                box = tuple(int(t) for t in toks[1].split(","))
                comps = [float(t) for t in toks[3].split(",")]
                if toks[2] == "tensor_diag":
                    if len(comps) != 3:
                        raise ValueError(f"{path}:{ln}: tensor_diag needs 3 values")
                    tensor = np.diag(comps)
                else:
                    if len(comps) != 6:
                        raise ValueError(f"{path}:{ln}: tensor needs 6 values "
                                         "(xx, yy, zz, xy, xz, yz)")
                    xx, yy, zz, xy, xz, yz = comps
                    tensor = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
                if len(box) != 6:
                    raise ValueError(f"{path}:{ln}: box needs 6 bounds")
                tensors.append(tensor)
                boxes.append(box)
            else:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
    if extents is None or len(extents) != 3:
        raise ValueError(f"{path}: missing or malformed extents")
    if not tensors:
        raise ValueError(f"{path}: no region lines")
    return PhantomSpec(extents=extents, region_tensors=tensors, region_boxes=boxes,
                       shells=shells, dirs_per_shell=dirs_per_shell,
                       noise_sigma=noise_sigma, seed=seed)


def tensor_attenuation(tensor: np.ndarray, b: float, direction: np.ndarray) -> float:
    """Single-tensor signal model: exp(-b v^T D v)."""
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return float(np.exp(-b * v @ np.asarray(tensor) @ v))


def default_region_layout(extents) -> tuple:
    """Five-compartment layout: x-, y-, z-aligned anisotropic fibers and a
    fast-diffusing CSF-like block over an isotropic background; used by the
    CLI and the desk-scale experiments."""
    nx, ny, nz = extents
    aniso = lambda ax: np.diag([1.7e-3 if i == ax else 0.2e-3 for i in range(3)])
    tensors = [np.eye(3) * 0.7e-3, aniso(0), aniso(1), aniso(2), np.eye(3) * 3.0e-3]
    boxes = [
        (0, nx, 0, ny, 0, nz),
        (0, nx // 2, 0, ny // 2, 0, nz),
        (nx // 2, nx, 0, ny // 2, 0, nz),
        (0, nx // 2, ny // 2, ny, 0, nz),
        (nx // 2, nx, ny // 2, ny, 0, nz),
    ]
    return tensors, boxes


def generate_phantom(spec: PhantomSpec):
    """Simulate the phantom; returns (DWIVolumeSet, ground-truth tensor field).

    Per voxel and acquisition point the attenuation is exp(-b v^T D v) plus
    seeded Gaussian noise on the attenuation, clipped to [0, 2]. Directions
    are seeded uniform samples of the sphere, one independent set per shell.
    """
    rng = Rng(spec.seed)
    points = []
    for si, b in enumerate(spec.shells):
        if b <= 0:
            raise ValueError(f"shell b-values must be positive, got {b}")
        dirs = rng.spawn(1, si).uniform_sphere(spec.dirs_per_shell)
        points.extend(DiffusionPoint(b=float(b), dir=BVector(*d)) for d in dirs)
    table = GradientTable.from_points(points)

    lab = spec.label_map()
    tensors = np.stack([np.asarray(t, dtype=np.float64) for t in spec.region_tensors])
    bvals = np.array([p.b for p in points])
    vecs = np.stack([p.dir.as_array() for p in points])
    # (K, Nd) decay exponents, then gathered per voxel through the label map
    expo = bvals[None, :] * np.einsum("ni,kij,nj->kn", vecs, tensors, vecs)
    att = np.exp(-expo)[lab]  # (Nx, Ny, Nz, Nd)
    if spec.noise_sigma > 0:
        att = att + rng.spawn(2).normal(att.shape, scale=spec.noise_sigma)
    att = np.clip(att, 0.0, CLIP_MAX)
    vol = DWIVolumeSet(signal=att, table=table)
    truth = tensors[lab]  # (Nx, Ny, Nz, 3, 3)
    return vol, truth
