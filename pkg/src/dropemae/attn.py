"""Distance-modulated rotary attention, factorized over grid axes.

Attention logits between tokens m and n are q_m^T R(D) k_n, where R(D) is a
block-diagonal matrix of 2x2 rotations with angles D * alpha_i and
alpha_i = 10000^(-2(i-1)/d_h). For the diffusion axis, D is the acquisition
space distance between the two volumes (symmetric, >= 0); for the spatial
axis an optional plugin uses the signed ordinal patch-index difference per
axis, which reduces to standard rotary embedding on a 1D sequence.

Because q^T R(D) k expands into cos/sin-weighted 2x2 forms,

    sum_i cos(D a_i)(q1 k1 + q2 k2) + sin(D a_i)(q2 k1 - q1 k2),

the score is computed per pair in O(d_h) without materializing R. The
distance-indexed rotation cannot be factored onto q and k separately (D is
not a difference of per-token phases), so scores cost O(pairs x d_h);
the ordinal plugin keeps the factorized O(tokens x d_h) rotation path.

The encoder alternates attention along the diffusion axis (each spatial
slot attends over volumes) and the spatial axis (each volume attends over
patches), pre-norm, with a GELU MLP after every attention sublayer. A
summary token is produced by one final pooling attention over all tokens
with identity rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor
from .rng import Rng

__all__ = [
    "RotationSpec", "AttentionConfig", "TokenGrid",
    "LinearParams", "LayerNormParams", "AttnParams", "MlpParams",
    "EncoderBlock", "ClsHead",
    "drope_score", "pair_rotation_scores", "rotate_pairs",
    "diffusion_attention", "spatial_attention", "mlp_forward",
    "encoder_forward", "ordinal_angle_table", "split_pairs",
]


@dataclass(frozen=True)
class RotationSpec:
    """Per-pair rotation rates for a head of dimension d_head."""

    d_head: int

    def __post_init__(self):
        if self.d_head <= 0 or self.d_head % 2 != 0:
            raise ValueError(f"head dimension must be positive and even, got {self.d_head}")

    @property
    def alphas(self) -> np.ndarray:
        i = np.arange(self.d_head // 2)
        return 10000.0 ** (-2.0 * i / self.d_head)


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    axis: str  # "spatial" | "diffusion"
    relative_pe: str = "drope"  # "drope" | "ordinal_rope" | "none"
    ordinal_pair_split: Optional[tuple] = None  # pairs per axis; None = near-equal

    def __post_init__(self):
        if self.axis not in ("spatial", "diffusion"):
            raise ValueError(f"unknown axis {self.axis!r}")
        if self.relative_pe not in ("drope", "ordinal_rope", "none"):
            raise ValueError(f"unknown relative_pe {self.relative_pe!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_head % 2 != 0:
            raise ValueError(f"per-head dimension must be even, got {self.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TokenGrid:
    """(S, Nd, d) token embeddings with per-slot geometry metadata.

    A grid fresh from patchification covers every patch, so S equals the
    product of ``grid_shape``; masking may carve out a rectangular sub-grid
    (``full_grid=False``) whose slots keep their original patch indices.
    """

    tokens: Tensor
    spatial_indices: np.ndarray  # (S, 3) patch-grid indices
    grid_shape: tuple  # (gx, gy, gz)
    points: list  # Nd DiffusionPoints
    cls: Optional[Tensor] = None
    full_grid: bool = True

    def __post_init__(self):
        s, ndirs = self.tokens.shape[0], self.tokens.shape[1]
        gx, gy, gz = self.grid_shape
        if self.full_grid and s != gx * gy * gz:
            raise ValueError(f"S={s} does not equal grid {self.grid_shape}")
        if self.spatial_indices.shape != (s, 3):
            raise ValueError("spatial index metadata does not match S")
        if s and np.any(self.spatial_indices >= np.array(self.grid_shape)):
            raise ValueError("spatial index outside the patch grid")
        if len(self.points) != ndirs:
            raise ValueError("diffusion metadata does not match Nd")
        if any(p.is_reference for p in self.points):
            raise ValueError("b=0 reference volumes must not become tokens")

    @property
    def n_spatial(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_dirs(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.spatial_indices, self.grid_shape, self.points,
                         self.cls, self.full_grid)


def drope_score(q: np.ndarray, k: np.ndarray, dist: float, spec: RotationSpec) -> float:
    """q^T R(dist) k in O(d_h) via the cos/sin pair decomposition."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (spec.d_head,) or k.shape != (spec.d_head,):
        raise ValueError(f"q, k must have shape ({spec.d_head},)")
    ang = dist * spec.alphas
    c, s = np.cos(ang), np.sin(ang)
    q1, q2 = q[0::2], q[1::2]
    k1, k2 = k[0::2], k[1::2]
    return float(np.sum(c * (q1 * k1 + q2 * k2) + s * (q2 * k1 - q1 * k2)))


def pair_rotation_scores(q: Tensor, k: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """All-pairs rotary scores: out[..., m, n] = q_m^T R(angle[m, n]) k_n.

    ``cos``/``sin`` hold cos/sin of angle[m, n] * alpha_i with shape
    (Lq, Lk, d_h/2), broadcast over the leading batch/head dims of q and k.
    Differentiable in q and k; the angle tables are constants.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[-1] % 2 != 0:
        raise nd.ShapeError(f"q {q.shape} and k {k.shape} need a shared even last dim")
    q1, q2 = q.data[..., 0::2], q.data[..., 1::2]
    k1, k2 = k.data[..., 0::2], k.data[..., 1::2]
    q1e, q2e = q1[..., :, None, :], q2[..., :, None, :]
    k1e, k2e = k1[..., None, :, :], k2[..., None, :, :]
    out = (cos * (q1e * k1e + q2e * k2e) + sin * (q2e * k1e - q1e * k2e)).sum(axis=-1)

    def vjp(g):
        ge = g[..., None]
        dq1 = (ge * (cos * k1e - sin * k2e)).sum(axis=-2)
        dq2 = (ge * (cos * k2e + sin * k1e)).sum(axis=-2)
        dk1 = (ge * (cos * q1e + sin * q2e)).sum(axis=-3)
        dk2 = (ge * (cos * q2e - sin * q1e)).sum(axis=-3)
        dq = np.empty_like(q.data)
        dq[..., 0::2], dq[..., 1::2] = dq1, dq2
        dk = np.empty_like(k.data)
        dk[..., 0::2], dk[..., 1::2] = dk1, dk2
        return dq, dk

    return nd.custom_op(out, (q, k), vjp)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last axis by per-token angles.

    ``cos``/``sin`` have shape (L, d_h/2), broadcast over leading dims of
    x (..., L, d_h). This is the factorized path for ordinal rotary PE.
    """
    x1, x2 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def vjp(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(x.data)
        dx[..., 0::2] = g1 * cos + g2 * sin
        dx[..., 1::2] = -g1 * sin + g2 * cos
        return (dx,)

    return nd.custom_op(out, (x,), vjp)


def split_pairs(n_pairs: int, split: Optional[tuple] = None) -> tuple:
    """Pairs-per-axis allocation for the 3-axis ordinal plugin."""
    if split is not None:
        if len(split) != 3 or sum(split) != n_pairs or min(split) < 0:
            raise ValueError(f"pair split {split} must be 3 non-negative ints summing to {n_pairs}")
        return tuple(split)
    base, rem = divmod(n_pairs, 3)
    return tuple(base + (1 if a < rem else 0) for a in range(3))


def ordinal_angle_table(indices: np.ndarray, d_head: int,
                        split: Optional[tuple] = None) -> np.ndarray:
    """Per-token rotary phases for 3D ordinal positions, shape (L, d_h/2).

    Each axis owns a block of pairs and runs an independent standard rotary
    code over its block (rates 10000^(-2(j-1)/d_g) for block dim d_g), so a
    degenerate grid with one varying axis reduces to plain 1D rotary PE on
    that block.
    """
    pairs = split_pairs(d_head // 2, split)
    cols = []
    for axis, p in enumerate(pairs):
        if p == 0:
            continue
        alphas = 10000.0 ** (-2.0 * np.arange(p) / (2 * p))
        cols.append(indices[:, axis:axis + 1] * alphas[None, :])
    return np.concatenate(cols, axis=1)


def _heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, L, d) -> (B, H, L, d_h)."""
    b, l, d = x.shape
    return nd.transpose(nd.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    """(B, H, L, d_h) -> (B, L, d)."""
    b, h, l, dh = x.shape
    return nd.reshape(nd.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


@dataclass
class LinearParams:
    w: Tensor  # (d_in, d_out)
    b: Tensor  # (d_out,)

    @staticmethod
    def init(d_in: int, d_out: int, rng: Rng, dtype=np.float64, zero: bool = False) -> "LinearParams":
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = 1.0 / math.sqrt(d_in)
            w = (rng.uniform((d_in, d_out)) * 2.0 - 1.0) * bound
        return LinearParams(w=nd.tensor(w.astype(dtype), requires_grad=True),
                            b=nd.tensor(np.zeros(d_out, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return nd.linear(x, self.w, self.b)

    def named(self, prefix: str) -> Iterator:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class LayerNormParams:
    g: Tensor
    b: Tensor

    @staticmethod
    def init(d: int, dtype=np.float64) -> "LayerNormParams":
        return LayerNormParams(g=nd.tensor(np.ones(d, dtype=dtype), requires_grad=True),
                               b=nd.tensor(np.zeros(d, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return nd.layernorm(x, self.g, self.b)

    def named(self, prefix: str) -> Iterator:
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


@dataclass
class AttnParams:
    ln: LayerNormParams
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams

    @staticmethod
    def init(d: int, rng: Rng, dtype=np.float64) -> "AttnParams":
        return AttnParams(
            ln=LayerNormParams.init(d, dtype),
            q=LinearParams.init(d, d, rng.spawn(1), dtype),
            k=LinearParams.init(d, d, rng.spawn(2), dtype),
            v=LinearParams.init(d, d, rng.spawn(3), dtype),
            o=LinearParams.init(d, d, rng.spawn(4), dtype),
        )

    def named(self, prefix: str) -> Iterator:
        for part, name in ((self.ln, "ln"), (self.q, "q"), (self.k, "k"),
                           (self.v, "v"), (self.o, "o")):
            yield from part.named(f"{prefix}.{name}")


@dataclass
class MlpParams:
    ln: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams

    @staticmethod
    def init(d: int, rng: Rng, hidden_ratio: int = 4, dtype=np.float64) -> "MlpParams":
        return MlpParams(
            ln=LayerNormParams.init(d, dtype),
            fc1=LinearParams.init(d, hidden_ratio * d, rng.spawn(1), dtype),
            fc2=LinearParams.init(hidden_ratio * d, d, rng.spawn(2), dtype),
        )

    def named(self, prefix: str) -> Iterator:
        for part, name in ((self.ln, "ln"), (self.fc1, "fc1"), (self.fc2, "fc2")):
            yield from part.named(f"{prefix}.{name}")


@dataclass
class EncoderBlock:
    cfg: AttentionConfig
    attn: AttnParams
    mlp: MlpParams

    @staticmethod
    def init(cfg: AttentionConfig, rng: Rng, hidden_ratio: int = 4, dtype=np.float64) -> "EncoderBlock":
        return EncoderBlock(cfg=cfg,
                            attn=AttnParams.init(cfg.d_model, rng.spawn(1), dtype),
                            mlp=MlpParams.init(cfg.d_model, rng.spawn(2), hidden_ratio, dtype))

    def named(self, prefix: str) -> Iterator:
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.mlp.named(f"{prefix}.mlp")


@dataclass
class ClsHead:
    """Final pooling attention producing the sample-level summary vector."""

    token: Tensor  # (d,) learnable query seed
    ln: LayerNormParams
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    n_heads: int = 1

    @staticmethod
    def init(d: int, n_heads: int, rng: Rng, dtype=np.float64) -> "ClsHead":
        return ClsHead(
            token=nd.tensor(rng.normal((d,), scale=0.02).astype(dtype), requires_grad=True),
            ln=LayerNormParams.init(d, dtype),
            q=LinearParams.init(d, d, rng.spawn(1), dtype),
            k=LinearParams.init(d, d, rng.spawn(2), dtype),
            v=LinearParams.init(d, d, rng.spawn(3), dtype),
            o=LinearParams.init(d, d, rng.spawn(4), dtype),
            n_heads=n_heads,
        )

    def named(self, prefix: str) -> Iterator:
        yield f"{prefix}.token", self.token
        for part, name in ((self.ln, "ln"), (self.q, "q"), (self.k, "k"),
                           (self.v, "v"), (self.o, "o")):
            yield from part.named(f"{prefix}.{name}")


def _attention(x: Tensor, cfg: AttentionConfig, params: AttnParams,
               scores_fn, probe: Optional[dict] = None) -> Tensor:
    """Shared pre-norm multi-head attention body over (B, L, d) tokens."""
    h = params.ln(x)
    q = _heads(params.q(h), cfg.n_heads)
    k = _heads(params.k(h), cfg.n_heads)
    v = _heads(params.v(h), cfg.n_heads)
    logits = nd.mul_scalar(scores_fn(q, k), 1.0 / math.sqrt(cfg.d_head))
    weights = nd.softmax(logits)
    if probe is not None:
        probe["logits"] = logits.data.copy()
        probe["weights"] = weights.data.copy()
    mixed = _merge_heads(nd.matmul(weights, v))
    return nd.add(x, params.o(mixed))


def diffusion_attention(grid: TokenGrid, cfg: AttentionConfig, params: AttnParams,
                        dmat, probe: Optional[dict] = None) -> TokenGrid:
    """Attention across the Nd volumes, independently per spatial slot.

    ``dmat`` is the (Nd, Nd) acquisition-space distance matrix; with
    relative_pe="drope" it drives the rotary score angles.
    """
    if cfg.axis != "diffusion":
        raise ValueError("config axis must be 'diffusion'")
    ndirs = grid.n_dirs
    spec = RotationSpec(cfg.d_head)

    dtype = grid.tokens.dtype
    if cfg.relative_pe == "drope":
        dm = dmat.data if isinstance(dmat, Tensor) else np.asarray(dmat)
        if dm.shape != (ndirs, ndirs):
            raise ValueError(f"distance matrix {dm.shape} does not match Nd={ndirs}")
        ang = dm[:, :, None] * spec.alphas
        cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
        scores_fn = lambda q, k: pair_rotation_scores(q, k, cos, sin)
    elif cfg.relative_pe == "ordinal_rope":
        pos = np.arange(ndirs, dtype=np.float64)[:, None] * spec.alphas[None, :]
        c, s = np.cos(-pos).astype(dtype), np.sin(-pos).astype(dtype)
        scores_fn = lambda q, k: nd.matmul(rotate_pairs(q, c, s),
                                           nd.transpose(rotate_pairs(k, c, s), (0, 1, 3, 2)))
    else:
        scores_fn = lambda q, k: nd.matmul(q, nd.transpose(k, (0, 1, 3, 2)))

    out = _attention(grid.tokens, cfg, params, scores_fn, probe)
    return grid.with_tokens(out)


def spatial_attention(grid: TokenGrid, cfg: AttentionConfig, params: AttnParams,
                      probe: Optional[dict] = None) -> TokenGrid:
    """Attention across the S patches, independently per volume."""
    if cfg.axis != "spatial":
        raise ValueError("config axis must be 'spatial'")
    x = nd.transpose(grid.tokens, (1, 0, 2))  # (Nd, S, d)

    if cfg.relative_pe == "ordinal_rope":
        ang = ordinal_angle_table(grid.spatial_indices.astype(np.float64),
                                  cfg.d_head, cfg.ordinal_pair_split)
        # rotate token t by -idx_t * alpha so q^T k realizes R((m - n) alpha)
        c, s = np.cos(-ang).astype(grid.tokens.dtype), np.sin(-ang).astype(grid.tokens.dtype)
        scores_fn = lambda q, k: nd.matmul(rotate_pairs(q, c, s),
                                           nd.transpose(rotate_pairs(k, c, s), (0, 1, 3, 2)))
    elif cfg.relative_pe == "drope":
        raise ValueError("acquisition-space distances are undefined along the spatial axis")
    else:
        scores_fn = lambda q, k: nd.matmul(q, nd.transpose(k, (0, 1, 3, 2)))

    out = _attention(x, cfg, params, scores_fn, probe)
    return grid.with_tokens(nd.transpose(out, (1, 0, 2)))


def mlp_forward(x: Tensor, params: MlpParams) -> Tensor:
    """Pre-norm GELU MLP sublayer with residual."""
    return nd.add(x, params.fc2(nd.gelu(params.fc1(params.ln(x)))))


def cls_pool(grid: TokenGrid, head: ClsHead) -> Tensor:
    """Pool all S*Nd tokens into one vector with identity-rotation attention."""
    s, ndirs, d = grid.tokens.shape
    dh = d // head.n_heads
    flat = nd.reshape(grid.tokens, (s * ndirs, d))
    t = head.ln(flat)
    k = nd.transpose(nd.reshape(head.k(t), (s * ndirs, head.n_heads, dh)), (1, 0, 2))
    v = nd.transpose(nd.reshape(head.v(t), (s * ndirs, head.n_heads, dh)), (1, 0, 2))
    q = nd.reshape(head.q(nd.reshape(head.token, (1, d))), (head.n_heads, 1, dh))
    logits = nd.mul_scalar(nd.matmul(q, nd.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    pooled = nd.reshape(nd.matmul(nd.softmax(logits), v), (d,))
    return nd.add(head.token, head.o(pooled))


def encoder_forward(grid: TokenGrid, blocks, dmat=None, cls_head: Optional[ClsHead] = None,
                    probe: Optional[list] = None):
    """Run alternating axial blocks, then the pooling head.

    Returns (TokenGrid, cls vector or None). ``probe``, when given, collects
    one dict of logits/weights per block.
    """
    for block in blocks:
        block_probe = {} if probe is not None else None
        if block.cfg.axis == "diffusion":
            grid = diffusion_attention(grid, block.cfg, block.attn, dmat, block_probe)
        else:
            grid = spatial_attention(grid, block.cfg, block.attn, block_probe)
        grid = grid.with_tokens(mlp_forward(grid.tokens, block.mlp))
        if probe is not None:
            probe.append(block_probe)
    cls = cls_pool(grid, cls_head) if cls_head is not None else None
    return grid, cls
