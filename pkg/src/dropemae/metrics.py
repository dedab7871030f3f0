"""Reconstruction quality, tensor-model fitting, and latent probing.

PSNR uses the clip range of the normalized signal (2.0) as its default peak.
SSIM is computed slice-wise on axial planes with an 11x11 Gaussian window
(sigma 1.5, K1=0.01, K2=0.03) and averaged. The diffusion tensor fit is
voxelwise ordinary least squares on -ln(S/S0) = b v^T D v over the six
unique tensor components, with negative eigenvalues clamped to zero before
the scalar maps:

    FA = sqrt(3/2) * ||lambda - mean|| / ||lambda||,   MD = mean(lambda).

Probing trains a small head on frozen summary vectors under k-fold
cross-validation and reports pooled out-of-fold metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ndtensor as nd
from .dmri_io import DWIVolumeSet
from .rng import Rng

__all__ = [
    "DTensorFit", "ProbeHead", "ProbeError", "ProbeMetrics",
    "psnr", "ssim", "fit_dti", "fa_md_error", "fa_from_eigenvalues", "train_probe",
]

_SIGNAL_FLOOR = 1e-6


class ProbeError(ValueError):
    """Probe target/feature configuration that admits no defined metric."""


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 2.0) -> float:
    """10 log10(range^2 / MSE) in dB; identical inputs give +inf."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_slice(x: np.ndarray, y: np.ndarray, w: np.ndarray, c1: float, c2: float) -> float:
    size = w.shape[0]
    win_x = np.lib.stride_tricks.sliding_window_view(x, (size, size))
    win_y = np.lib.stride_tricks.sliding_window_view(y, (size, size))
    mu_x = np.tensordot(win_x, w, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(win_y, w, axes=([2, 3], [0, 1]))
    xx = np.tensordot(win_x * win_x, w, axes=([2, 3], [0, 1])) - mu_x * mu_x
    yy = np.tensordot(win_y * win_y, w, axes=([2, 3], [0, 1])) - mu_y * mu_y
    xy = np.tensordot(win_x * win_y, w, axes=([2, 3], [0, 1])) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 2.0,
         window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity of two 3D volumes, slice-wise over z."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise ValueError(f"ssim expects 3D volumes, got shape {x.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"slices {x.shape[:2]} smaller than the {window}x{window} window")
    w = _gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = [_ssim_slice(x[:, :, z], y[:, :, z], w, c1, c2) for z in range(x.shape[2])]
    return float(np.mean(vals))


def fa_from_eigenvalues(lams: np.ndarray) -> np.ndarray:
    """Fractional anisotropy of eigenvalue triples (last axis of size 3)."""
    lams = np.asarray(lams, dtype=np.float64)
    mean = lams.mean(axis=-1, keepdims=True)
    num = np.sqrt((np.square(lams - mean)).sum(axis=-1))
    den = np.sqrt(np.square(lams).sum(axis=-1))
    out = np.zeros(lams.shape[:-1])
    np.divide(num, den, out=out, where=den > 0)
    return np.sqrt(1.5) * out


@dataclass
class DTensorFit:
    """Voxelwise tensors (mm^2/s), sorted eigenvalues, and FA/MD maps."""

    tensors: np.ndarray  # (..., 3, 3)
    eigenvalues: np.ndarray  # (..., 3), descending, clamped >= 0
    fa: np.ndarray
    md: np.ndarray


def fit_dti(vol: DWIVolumeSet) -> DTensorFit:
    """Ordinary least squares single-tensor fit of normalized attenuations.

    Needs at least 6 directions spanning the quadratic forms; attenuations
    are floored at 1e-6 before the log. Negative eigenvalues are clamped to
    zero before FA/MD.
    """
    pts = vol.table.points
    if len(pts) < 6:
        raise ValueError(f"tensor fit needs >= 6 directions, got {len(pts)}")
    bvals = np.array([p.b for p in pts])
    vecs = np.stack([p.dir.as_array() for p in pts])
    vx, vy, vz = vecs[:, 0], vecs[:, 1], vecs[:, 2]
    design = bvals[:, None] * np.stack(
        [vx * vx, vy * vy, vz * vz, 2 * vx * vy, 2 * vx * vz, 2 * vy * vz], axis=1)
    if np.linalg.matrix_rank(design) < 6:
        raise ValueError("design matrix is rank deficient; directions too collinear")

    logs = -np.log(np.maximum(vol.signal, _SIGNAL_FLOOR))  # (Nx, Ny, Nz, Nd)
    flat = logs.reshape(-1, len(pts))
    coef, *_ = np.linalg.lstsq(design, flat.T, rcond=None)  # (6, Nvox)
    coef = coef.T.reshape(vol.extents + (6,))
    dxx, dyy, dzz, dxy, dxz, dyz = np.moveaxis(coef, -1, 0)
    tensors = np.empty(vol.extents + (3, 3))
    tensors[..., 0, 0], tensors[..., 1, 1], tensors[..., 2, 2] = dxx, dyy, dzz
    tensors[..., 0, 1] = tensors[..., 1, 0] = dxy
    tensors[..., 0, 2] = tensors[..., 2, 0] = dxz
    tensors[..., 1, 2] = tensors[..., 2, 1] = dyz
    lams = np.linalg.eigvalsh(tensors)[..., ::-1]  # descending
    lams = np.maximum(lams, 0.0)
    return DTensorFit(tensors=tensors, eigenvalues=lams,
                      fa=fa_from_eigenvalues(lams), md=lams.mean(axis=-1))


def fa_md_error(fit_a: DTensorFit, fit_b: DTensorFit, mask: Optional[np.ndarray] = None):
    """Masked mean absolute FA and MD differences between two fits."""
    if fit_a.fa.shape != fit_b.fa.shape:
        raise ValueError("fits cover different grids")
    if mask is None:
        mask = np.ones(fit_a.fa.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    fa_err = float(np.abs(fit_a.fa - fit_b.fa)[mask].mean())
    md_err = float(np.abs(fit_a.md - fit_b.md)[mask].mean())
    return fa_err, md_err


@dataclass(frozen=True)
class ProbeHead:
    """Head spec for probing frozen features."""

    kind: str = "linear"  # "linear" | "mlp"
    task: str = "regression"  # "regression" | "classification"
    hidden: int = 32
    steps: int = 400
    lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class ProbeMetrics:
    """Pooled out-of-fold metrics plus per-fold breakdowns (entries may be
    None when a fold's test split leaves a statistic undefined)."""

    rho: Optional[float] = None
    mse: Optional[float] = None
    accuracy: Optional[float] = None
    auroc: Optional[float] = None
    per_fold: list = None

    def __post_init__(self):
        if self.per_fold is None:
            self.per_fold = []


def _auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUROC with average ranks on ties."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    r = 1.0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (r + r + (j - i))
        r += j - i + 1
        i = j + 1
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ProbeError("AUROC needs both classes present")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _fit_linear(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least squares with intercept and a tiny ridge for conditioning."""
    a = np.hstack([x, np.ones((x.shape[0], 1))])
    ata = a.T @ a + 1e-8 * np.eye(a.shape[1])
    return np.linalg.solve(ata, a.T @ y)


def _predict_linear(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))]) @ w


def _fit_mlp(x: np.ndarray, y: np.ndarray, head: ProbeHead) -> tuple:
    """One-hidden-layer GELU head trained with Adam on squared error."""
    rng = Rng(head.seed)
    d, h = x.shape[1], head.hidden
    bound = 1.0 / math.sqrt(d)
    w1 = nd.tensor((rng.uniform((d, h)) * 2 - 1) * bound, requires_grad=True)
    b1 = nd.tensor(np.zeros(h), requires_grad=True)
    w2 = nd.tensor((rng.uniform((h, 1)) * 2 - 1) / math.sqrt(h), requires_grad=True)
    b2 = nd.tensor(np.zeros(1), requires_grad=True)
    params = [w1, b1, w2, b2]
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    xs = nd.constant(x)
    target = y[:, None]
    full = np.ones(target.shape, dtype=bool)
    for t in range(1, head.steps + 1):
        for p in params:
            p.zero_grad()
        with nd.Tape() as tape:
            pred = nd.linear(nd.gelu(nd.linear(xs, w1, b1)), w2, b2)
            loss = nd.masked_mse(pred, target, full)
            tape.backward(loss)
        for i, p in enumerate(params):
            g = p.grad
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mh = m[i] / (1 - 0.9 ** t)
            vh = v[i] / (1 - 0.999 ** t)
            p.data -= head.lr * mh / (np.sqrt(vh) + 1e-8)
    def predict(xq: np.ndarray) -> np.ndarray:
        h1 = xq @ w1.data + b1.data
        cdf = 0.5 * (1.0 + np.vectorize(math.erf)(h1 / math.sqrt(2)))
        return ((h1 * cdf) @ w2.data + b2.data)[:, 0]
    return predict, params


def train_probe(features, targets, head: ProbeHead, folds: int = 5) -> ProbeMetrics:
    """k-fold cross-validated probe on frozen features.

    Regression reports Pearson rho and MSE of pooled out-of-fold
    predictions; classification reports accuracy and rank AUROC. Labels for
    classification are binary (0/1 or -1/+1).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        x = np.stack(list(features))
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows vs {y.shape[0]} targets")
    if folds < 2 or folds > x.shape[0]:
        raise ValueError(f"need 2 <= folds <= n_samples, got {folds}")
    if head.task == "classification":
        y = np.where(y > np.median(np.unique(y)) - 1e-12, 1.0, -1.0) if len(np.unique(y)) == 2 \
            else None
        if y is None:
            raise ProbeError("classification targets must be binary")
    elif np.all(x.std(axis=0) < 1e-12):
        # a constant design admits only intercepts; correlation is undefined
        raise ProbeError("features are constant; regression correlation undefined")

    fold_of = np.arange(x.shape[0]) % folds
    preds = np.empty(x.shape[0])
    for f in range(folds):
        test = fold_of == f
        train = ~test
        if head.task == "classification" and len(np.unique(y[train])) < 2:
            raise ProbeError(f"fold {f} has a single class in training")
        # standardize per fold; guards the MLP's step sizes
        mu, sd = x[train].mean(axis=0), x[train].std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        xtr, xte = (x[train] - mu) / sd, (x[test] - mu) / sd
        if head.kind == "linear":
            w = _fit_linear(xtr, y[train])
            preds[test] = _predict_linear(w, xte)
        else:
            predict, _ = _fit_mlp(xtr, y[train], head)
            preds[test] = predict(xte)

    def fold_metrics(sel) -> ProbeMetrics:
        p, t = preds[sel], y[sel]
        if head.task == "regression":
            rho = float(np.corrcoef(p, t)[0, 1]) if p.std() > 1e-12 and t.std() > 1e-12 \
                else None
            return ProbeMetrics(rho=rho, mse=float(np.mean((p - t) ** 2)))
        acc = float(np.mean(np.sign(p) == t))
        both = len(np.unique(t)) == 2
        return ProbeMetrics(accuracy=acc, auroc=_auroc(p, t) if both else None)

    per_fold = [fold_metrics(fold_of == f) for f in range(folds)]
    if head.task == "regression":
        if preds.std() < 1e-12 or y.std() < 1e-12:
            raise ProbeError("constant predictions or targets; correlation undefined")
        rho = float(np.corrcoef(preds, y)[0, 1])
        return ProbeMetrics(rho=rho, mse=float(np.mean((preds - y) ** 2)),
                            per_fold=per_fold)
    acc = float(np.mean(np.sign(preds) == y))
    return ProbeMetrics(accuracy=acc, auroc=_auroc(preds, y), per_fold=per_fold)
