"""Shared fixtures and independent oracles.

The oracles here (finite differences, dense rotation matrices, nested-loop
convolution, windowed SSIM) deliberately avoid the library's fast paths so
that agreement between the two is evidence, not tautology.
"""

import math

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None, max_examples=40)
settings.load_profile("suite")


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at x by central differences, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = 1e-5, atol: float = 1e-8) -> None:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = np.argmax(err - tol)
    assert np.all(err <= tol), (
        f"gradient mismatch at flat index {worst}: "
        f"analytic {analytic.ravel()[worst]!r} vs numeric {numeric.ravel()[worst]!r}")


def dense_rotation_matrix(dist: float, alphas: np.ndarray) -> np.ndarray:
    """Explicit block-diagonal matrix of 2x2 rotations with angles dist*alpha."""
    d = 2 * len(alphas)
    r = np.zeros((d, d))
    for i, a in enumerate(alphas):
        ang = dist * a
        c, s = math.cos(ang), math.sin(ang)
        r[2 * i, 2 * i] = c
        r[2 * i, 2 * i + 1] = -s
        r[2 * i + 1, 2 * i] = s
        r[2 * i + 1, 2 * i + 1] = c
    return r


def reference_rope_score(q: np.ndarray, k: np.ndarray, delta: float) -> float:
    """Textbook rotary-embedding logit q^T R(delta) k over the full vector,
    with rates 10000^(-2(i-1)/d)."""
    d = len(q)
    alphas = 10000.0 ** (-2.0 * np.arange(d // 2) / d)
    return float(q @ dense_rotation_matrix(delta, alphas) @ k)


def brute_conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct six-nested-loop 3x3x3 convolution with zero padding 1."""
    cin, dd, hh, ww = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((cout, dd, hh, ww))
    for o in range(cout):
        for z in range(dd):
            for y in range(hh):
                for xx in range(ww):
                    acc = b[o]
                    for c in range(cin):
                        for i in range(3):
                            for j in range(3):
                                for kk in range(3):
                                    acc += w[o, c, i, j, kk] * xp[c, z + i, y + j, xx + kk]
                    out[o, z, y, xx] = acc
    return out


def brute_ssim_slice(x: np.ndarray, y: np.ndarray, data_range: float = 2.0) -> float:
    """Loop-based SSIM of one 2D slice (11x11 Gaussian window, sigma 1.5)."""
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for r in range(x.shape[0] - size + 1):
        for c in range(x.shape[1] - size + 1):
            wx = x[r:r + size, c:c + size]
            wy = y[r:r + size, c:c + size]
            mx = float((w * wx).sum())
            my = float((w * wy).sum())
            vx = float((w * wx * wx).sum()) - mx * mx
            vy = float((w * wy * wy).sum()) - my * my
            vxy = float((w * wx * wy).sum()) - mx * my
            vals.append(((2 * mx * my + c1) * (2 * vxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random 3D rotation via QR with determinant fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240811)
