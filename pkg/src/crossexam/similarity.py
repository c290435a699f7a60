"""Representation similarity: linear CKA, CCA, SVCCA and row-wise cosine.

The plain functions take (n, p) arrays and return floats. The ``*_loss``
functions take autodiff tensors and return a differentiable ``1 - similarity``.
All accumulation happens in float64.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CCA_REG = 1e-6
METRICS = ("cka", "cca", "svcca", "cos")


class SimilarityError(ValueError):
    """Similarity is undefined for the given activations."""


class DegenerateInput(SimilarityError):
    pass


class RankDeficient(SimilarityError):
    def __init__(self, side: str, rank: int, cols: int):
        super().__init__(f"{side} is rank deficient (rank {rank} < {cols} columns)")
        self.side = side


class DimensionMismatch(SimilarityError):
    pass


def _matrix(a, name: str = "A") -> np.ndarray:
    arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if arr.ndim != 2:
        raise DegenerateInput(f"{name} must be a 2-D activation matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DegenerateInput(f"{name} needs at least 2 rows to centre, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInput(f"{name} has non-finite entries")
    return arr


def _pair(a1, a2) -> tuple[np.ndarray, np.ndarray]:
    x, y = _matrix(a1, "A1"), _matrix(a2, "A2")
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    return x - x.mean(axis=0), y - y.mean(axis=0)


def center_gram(a) -> np.ndarray:
    """H (A A^T) H with H = I - 11^T / n."""
    x = _matrix(a)
    n = x.shape[0]
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    return h @ (x @ x.T) @ h.T


# ---- CKA ---------------------------------------------------------------------

def _cka_terms(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    # tr(K1 K2) = ||X^T Y||_F^2 for linear kernels; cheaper than forming n x n kernels when p < n
    xy = float(np.sum((x.T @ y) ** 2))
    xx = float(np.sum((x.T @ x) ** 2))
    yy = float(np.sum((y.T @ y) ** 2))
    scale = max(np.abs(x).max(), np.abs(y).max(), 1e-300)
    tiny = 1e-24 * scale ** 4 * x.shape[0] ** 2
    if xx <= tiny or yy <= tiny:
        side = "A1" if xx <= tiny else "A2"
        raise DegenerateInput(f"{side} has constant activations; centred kernel is zero and CKA is undefined")
    return xy, xx, yy


def cka(a1, a2) -> float:
    xy, xx, yy = _cka_terms(*_pair(a1, a2))
    return float(np.clip(xy / np.sqrt(xx * yy), 0.0, 1.0))


def cka_loss(a1: Tensor, a2: Tensor) -> Tensor:
    """1 - CKA(a1, a2) with gradients to both inputs."""
    x, y = _pair(a1, a2)
    xy, xx, yy = _cka_terms(x, y)
    norm = np.sqrt(xx * yy)
    value = xy / norm

    def back(g, need):
        g = float(g)
        kx_y = y @ (y.T @ x)  # K2 X
        ky_x = x @ (x.T @ y)  # K1 Y
        gx = gy = None
        if need[0]:
            gx = -g * (2.0 / norm) * (kx_y - (xy / xx) * (x @ (x.T @ x)))
            gx = gx - gx.mean(axis=0)
        if need[1]:
            gy = -g * (2.0 / norm) * (ky_x - (xy / yy) * (y @ (y.T @ y)))
            gy = gy - gy.mean(axis=0)
        return gx, gy

    return ad.custom(np.asarray(1.0 - value), (_as_tensor(a1), _as_tensor(a2)), back)


def _as_tensor(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a)


# ---- CCA ---------------------------------------------------------------------

def _rank(x: np.ndarray) -> int:
    if x.size == 0:
        return 0
    s = np.linalg.svd(x, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * max(x.shape) * np.finfo(np.float64).eps * 1e3))


def _inv_sqrt(c: np.ndarray):
    lam, vec = np.linalg.eigh(c)
    lam = np.maximum(lam, 1e-300)
    return vec @ np.diag(lam ** -0.5) @ vec.T, lam, vec


def _cca_core(x: np.ndarray, y: np.ndarray, reg: float):
    n = x.shape[0]
    cxx = x.T @ x / (n - 1) + reg * np.eye(x.shape[1])
    cyy = y.T @ y / (n - 1) + reg * np.eye(y.shape[1])
    cxy = x.T @ y / (n - 1)
    wx, lx, ex = _inv_sqrt(cxx)
    wy, ly, ey = _inv_sqrt(cyy)
    t = wx @ cxy @ wy
    u, s, vt = np.linalg.svd(t, full_matrices=False)
    return s, (n, cxy, wx, lx, ex, wy, ly, ey, u, vt)


def _check_rank(x: np.ndarray, y: np.ndarray) -> None:
    for side, m in (("A1", x), ("A2", y)):
        r = _rank(m)
        if r < m.shape[1]:
            raise RankDeficient(side, r, m.shape[1])


def cca_similarity(a1, a2, reg: float = CCA_REG) -> float:
    """Mean canonical correlation after whitening regularised covariances."""
    x, y = _pair(a1, a2)
    _check_rank(x, y)
    s, _ = _cca_core(x, y, reg)
    d = min(x.shape[1], y.shape[1])
    return float(np.clip(s[:d].mean(), 0.0, 1.0))


def _inv_sqrt_backward(dw: np.ndarray, lam: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Pull a gradient on C^{-1/2} back to C (symmetric), via divided differences of f(l) = l^-1/2."""
    dw = 0.5 * (dw + dw.T)
    f = lam ** -0.5
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) <= 1e-12 * np.maximum(np.abs(lam[:, None]), np.abs(lam[None, :]))
    fprime = -0.5 * lam ** -1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(close, 0.5 * (fprime[:, None] + fprime[None, :]), (f[:, None] - f[None, :]) / diff)
    inner = vec.T @ dw @ vec
    return vec @ (ratio * inner) @ vec.T


def _cca_backward(x, y, cache, g_s):
    n, cxy, wx, lx, ex, wy, ly, ey, u, vt = cache
    gt = (u * g_s[None, :]) @ vt
    gcxy = wx @ gt @ wy
    gwx = gt @ (cxy @ wy).T
    gwy = (wx @ cxy).T @ gt
    gcxx = _inv_sqrt_backward(gwx, lx, ex)
    gcyy = _inv_sqrt_backward(gwy, ly, ey)
    gx = (2.0 * x @ gcxx + y @ gcxy.T) / (n - 1)
    gy = (2.0 * y @ gcyy + x @ gcxy) / (n - 1)
    return gx - gx.mean(axis=0), gy - gy.mean(axis=0)


def _live_columns(x: np.ndarray) -> np.ndarray:
    spread = np.abs(x).max(axis=0)
    return spread > 1e-12 * max(spread.max(), 1e-300)


def cca_loss(a1: Tensor, a2: Tensor, reg: float = CCA_REG, drop_constant: bool = True) -> Tensor:
    """1 - mean canonical correlation, differentiable.

    With ``drop_constant`` the zero-variance columns of the current batch (dead
    units) are ignored, as they carry no correlation and would make the
    covariance singular.
    """
    x, y = _pair(a1, a2)
    cx = _live_columns(x) if drop_constant else np.ones(x.shape[1], bool)
    cy = _live_columns(y) if drop_constant else np.ones(y.shape[1], bool)
    if not cx.any() or not cy.any():
        raise DegenerateInput(f"{'A1' if not cx.any() else 'A2'} has constant activations; CCA is undefined")
    xs, ys = x[:, cx], y[:, cy]
    s, cache = _cca_core(xs, ys, reg)
    d = min(xs.shape[1], ys.shape[1])
    value = s[:d].mean()

    def back(g, need):
        g_s = np.zeros_like(s)
        g_s[:d] = -float(g) / d
        gxs, gys = _cca_backward(xs, ys, cache, g_s)
        gx = np.zeros_like(x)
        gy = np.zeros_like(y)
        gx[:, cx] = gxs
        gy[:, cy] = gys
        return gx, gy

    return ad.custom(np.asarray(1.0 - value), (_as_tensor(a1), _as_tensor(a2)), back)


# ---- SVCCA -------------------------------------------------------------------

def svd_basis(x: np.ndarray, variance_kept: float) -> np.ndarray:
    """Right singular vectors of centred ``x`` retaining ``variance_kept`` of the squared singular-value mass."""
    if not 0 < variance_kept <= 1:
        raise ValueError(f"variance_kept must be in (0, 1], got {variance_kept}")
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    energy = s ** 2
    total = energy.sum()
    if total <= 0:
        raise DegenerateInput("activations have zero variance; SVCCA is undefined")
    live = int(np.sum(s > s[0] * max(x.shape) * np.finfo(np.float64).eps * 1e3))
    cum = np.cumsum(energy[:live])
    k = int(np.searchsorted(cum, variance_kept * total * (1 - 1e-12))) + 1
    return vt[:min(k, live)].T


def svcca_similarity(a1, a2, variance_kept: float = 0.99, reg: float = CCA_REG) -> float:
    """CCA between the top singular directions of each side."""
    x, y = _pair(a1, a2)
    xp = x @ svd_basis(x, variance_kept)
    yp = y @ svd_basis(y, variance_kept)
    return cca_similarity(xp, yp, reg)


def svcca_loss(a1: Tensor, a2: Tensor, variance_kept: float = 0.99, reg: float = CCA_REG) -> Tensor:
    """1 - SVCCA. The truncation bases are computed from the current values and held constant."""
    x, y = _pair(a1, a2)
    v1 = Tensor(svd_basis(x, variance_kept))
    v2 = Tensor(svd_basis(y, variance_kept))
    return cca_loss(ad.matmul(_as_tensor(a1), v1), ad.matmul(_as_tensor(a2), v2), reg, drop_constant=False)


# ---- cosine ------------------------------------------------------------------

def _check_cos(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionMismatch(f"cosine similarity needs equal feature dims, got {x.shape[1]} and {y.shape[1]}")
    for side, m in (("A1", x), ("A2", y)):
        zero = np.flatnonzero(~np.any(m != 0, axis=1))
        if zero.size:
            raise DegenerateInput(f"{side} row {int(zero[0])} is all zeros; cosine is undefined")


def cosine_similarity(a1, a2) -> float:
    """Mean over samples of the row-wise cosine between the two activation sets."""
    x, y = np.asarray(a1, dtype=np.float64), np.asarray(a2, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DegenerateInput("cosine similarity needs 2-D activation matrices")
    _check_cos(x, y)
    cos = np.sum(x * y, axis=1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1))
    return float(np.mean(cos))


def cosine_loss(a1: Tensor, a2: Tensor) -> Tensor:
    """1 - mean row cosine, differentiable."""
    x, y = a1.data.astype(np.float64), a2.data.astype(np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DegenerateInput("cosine similarity needs 2-D activation matrices")
    _check_cos(x, y)
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    cos = np.sum(x * y, axis=1, keepdims=True) / (nx * ny)
    n = x.shape[0]

    def back(g, need):
        g = -float(g) / n
        gx = g * (y / (nx * ny) - cos * x / nx ** 2)
        gy = g * (x / (nx * ny) - cos * y / ny ** 2)
        return gx, gy

    return ad.custom(np.asarray(1.0 - cos.mean()), (a1, a2), back)


# ---- dispatch ----------------------------------------------------------------

def similarity(metric: str, a1, a2) -> float:
    if metric == "cka":
        return cka(a1, a2)
    if metric == "cca":
        x, y = _pair(a1, a2)
        cx, cy = _live_columns(x), _live_columns(y)
        return cca_similarity(x[:, cx], y[:, cy])
    if metric == "svcca":
        return svcca_similarity(a1, a2)
    if metric == "cos":
        return cosine_similarity(a1, a2)
    raise ValueError(f"unknown similarity metric {metric!r}; expected one of {METRICS}")


def similarity_loss(metric: str, a1: Tensor, a2: Tensor) -> Tensor:
    if metric == "cka":
        return cka_loss(a1, a2)
    if metric == "cca":
        return cca_loss(a1, a2)
    if metric == "svcca":
        return svcca_loss(a1, a2)
    if metric == "cos":
        return cosine_loss(a1, a2)
    raise ValueError(f"unknown similarity metric {metric!r}; expected one of {METRICS}")
