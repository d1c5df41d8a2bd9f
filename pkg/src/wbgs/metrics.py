"""Single-scale SSIM with an analytic gradient, and the L1 + SSIM training loss."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WIN = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
C1 = K1 ** 2
C2 = K2 ** 2


def gaussian_window(size: int = WIN, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


_G = gaussian_window()


def _filter(img):
    """Valid-mode separable correlation with the 11-tap window."""
    a = sliding_window_view(img, WIN, axis=0) @ _G
    return sliding_window_view(a, WIN, axis=1) @ _G


def _filter_adjoint(m):
    p = np.pad(m, WIN - 1)
    return _filter(p)  # the window is symmetric, so the adjoint is a full convolution


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"images must be 2-D with equal shapes, got {a.shape} and {b.shape}")
    if min(a.shape) < WIN:
        raise ValueError(f"images must be at least {WIN}x{WIN} for SSIM")
    return a, b


def _stats(a, b):
    ma, mb = _filter(a), _filter(b)
    saa = _filter(a * a) - ma * ma
    sbb = _filter(b * b) - mb * mb
    sab = _filter(a * b) - ma * mb
    A1 = 2 * ma * mb + C1
    A2 = 2 * sab + C2
    B1 = ma * ma + mb * mb + C1
    B2 = saa + sbb + C2
    return ma, mb, A1, A2, B1, B2


def ssim(a, b) -> float:
    """Mean SSIM over valid window positions (dynamic range 1)."""
    a, b = _check_pair(a, b)
    _, _, A1, A2, B1, B2 = _stats(a, b)
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    a, b = _check_pair(a, b)
    ma, mb, A1, A2, B1, B2 = _stats(a, b)
    den = B1 * B2
    S = A1 * A2 / den
    n = S.size
    dm = (2 * mb * (A2 - A1) / den - 2 * ma * S * (1.0 / B1 - 1.0 / B2)) / n
    dsaa = -S / B2 / n
    dsab = 2 * A1 / den / n
    grad = _filter_adjoint(dm) + 2 * a * _filter_adjoint(dsaa) + b * _filter_adjoint(dsab)
    return float(S.mean()), grad


def l1_ssim_loss(pred, gt, lam: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - lam) * mean|pred - gt| + lam * (1 - SSIM(pred, gt))`` and d/d(pred)."""
    pred, gt = _check_pair(pred, gt) if lam > 0 else (np.asarray(pred, float), np.asarray(gt, float))
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have equal shapes")
    diff = pred - gt
    value = (1.0 - lam) * float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    if lam > 0:
        s, ds = ssim_grad(pred, gt)
        value += lam * (1.0 - s)
        grad = grad - lam * ds
    return value, grad
