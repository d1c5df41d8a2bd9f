"""Tile-based rasterisation of hemisphere splats into a PAS image.

Two compositing modes are supported:

``alpha`` (default)
    ``a_i = (1 - delta_i) w_i(p)`` is an opacity and
    ``I(p) = sum_i a_i sig_i prod_{j<i} (1 - a_j)``.
``paper_literal``
    ``I(p) = sum_i (prod_{j<i} delta_j) w_i(p) sig_i``: delta is a pass-through
    fraction and the kernel weight only shapes emission.

Splats are ordered front to back by ``(depth, id)``. Each splat is instanced
once per tile its ``cutoff``-sigma box touches; per-instance gradients are
reduced in instance order so results do not depend on the thread count.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

# the bundled TBB is too old for numba; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numba  # noqa: E402
import numpy as np  # noqa: E402
from numba import njit, prange  # noqa: E402

MODES = ("alpha", "paper_literal")


@dataclass(frozen=True)
class RenderConfig:
    mode: str = "alpha"
    cutoff: float = 3.0
    transmittance_floor: float = 1e-4
    tile_size: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be > 0")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")


class Splats(NamedTuple):
    pixel_mean: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    ids: np.ndarray


class TileBins(NamedTuple):
    order: np.ndarray
    offsets: np.ndarray
    instances: np.ndarray
    conic: np.ndarray
    tile_size: int
    ntx: int
    nty: int


def set_workers(n: int | None) -> None:
    """Set the rasteriser thread count (results are identical for any count)."""
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _inverse2(cov):
    a, b, c, d = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 0], cov[:, 1, 1]
    det = a * d - b * c
    inv = np.empty_like(cov)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c / det
    inv[:, 1, 1] = a / det
    return inv


def _check(splats, delta, sig, W, H):
    m = len(splats.depth)
    if not (len(splats.pixel_mean) == len(splats.cov2d) == len(delta) == len(sig) == m):
        raise ValueError("splat arrays, delta and sig must be aligned")
    if W < 1 or H < 1:
        raise ValueError("image dimensions must be positive")


def _ids(splats):
    ids = getattr(splats, "ids", None)
    return np.arange(len(splats.depth)) if ids is None else np.asarray(ids)


@njit(cache=True)
def _tiles_of(mx, my, rx, ry, W, H, ts, ntx, nty, mark):
    """Fill ``mark`` (ntx*nty) with the tiles a splat touches; return count."""
    for t in range(ntx * nty):
        mark[t] = False
    r0 = max(0.0, np.ceil(my - ry))
    r1 = min(H - 1.0, np.floor(my + ry))
    if r0 > r1:
        return 0
    c0f = np.ceil(mx - rx)
    c1f = np.floor(mx + rx)
    if c1f < c0f:
        return 0
    colmark = np.zeros(ntx, dtype=np.bool_)
    if c1f - c0f + 1.0 >= W:
        for tx in range(ntx):
            colmark[tx] = True
    else:
        c0 = int(c0f)
        c1 = int(c1f)
        # bring c0 into [0, W)
        shift = (c0 // W) * W
        c0 -= shift
        c1 -= shift
        if c1 < W:
            for tx in range(c0 // ts, c1 // ts + 1):
                colmark[tx] = True
        else:
            for tx in range(c0 // ts, (W - 1) // ts + 1):
                colmark[tx] = True
            for tx in range(0, (c1 - W) // ts + 1):
                colmark[tx] = True
    n = 0
    for ty in range(int(r0) // ts, int(r1) // ts + 1):
        for tx in range(ntx):
            if colmark[tx]:
                mark[ty * ntx + tx] = True
                n += 1
    return n


@njit(cache=True)
def _bin(order, mean, cov, W, H, ts, ntx, nty, cutoff):
    ntiles = ntx * nty
    counts = np.zeros(ntiles, dtype=np.int64)
    mark = np.zeros(ntiles, dtype=np.bool_)
    for k in range(order.shape[0]):
        i = order[k]
        rx = cutoff * np.sqrt(abs(cov[i, 0, 0]))
        ry = cutoff * np.sqrt(abs(cov[i, 1, 1]))
        if _tiles_of(mean[i, 0], mean[i, 1], rx, ry, W, H, ts, ntx, nty, mark) > 0:
            for t in range(ntiles):
                if mark[t]:
                    counts[t] += 1
    offsets = np.zeros(ntiles + 1, dtype=np.int64)
    for t in range(ntiles):
        offsets[t + 1] = offsets[t] + counts[t]
    fill = offsets[:-1].copy()
    inst = np.empty(offsets[ntiles], dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        rx = cutoff * np.sqrt(abs(cov[i, 0, 0]))
        ry = cutoff * np.sqrt(abs(cov[i, 1, 1]))
        if _tiles_of(mean[i, 0], mean[i, 1], rx, ry, W, H, ts, ntx, nty, mark) > 0:
            for t in range(ntiles):
                if mark[t]:
                    inst[fill[t]] = i
                    fill[t] += 1
    return offsets, inst


@njit(inline="always")
def _wrap(dx, W):
    half = 0.5 * W
    return dx - W * np.floor((dx + half) / W)


@njit(parallel=True, cache=True)
def _forward(offsets, inst, mean, conic, delta, sig, W, H, ts, ntx, nty, cutoff2, floor, literal):
    img = np.zeros((H, W))
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        lo = offsets[t]
        hi = offsets[t + 1]
        if lo == hi:
            continue
        for row in range(ty * ts, min((ty + 1) * ts, H)):
            for col in range(tx * ts, min((tx + 1) * ts, W)):
                T = 1.0
                acc = 0.0
                for k in range(lo, hi):
                    i = inst[k]
                    dx = _wrap(col - mean[i, 0], W)
                    dy = row - mean[i, 1]
                    q = conic[i, 0, 0] * dx * dx + (conic[i, 0, 1] + conic[i, 1, 0]) * dx * dy \
                        + conic[i, 1, 1] * dy * dy
                    if q > cutoff2:
                        continue
                    w = np.exp(-0.5 * q)
                    if literal:
                        acc += T * w * sig[i]
                        T *= delta[i]
                    else:
                        a = (1.0 - delta[i]) * w
                        acc += T * a * sig[i]
                        T *= 1.0 - a
                    if T < floor:
                        break
                img[row, col] = acc
    return img


@njit(parallel=True, cache=True)
def _backward(offsets, inst, mean, conic, delta, sig, dimg, W, H, ts, ntx, nty, cutoff2, floor, literal):
    n_inst = inst.shape[0]
    g = np.zeros((n_inst, 8))
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        lo = offsets[t]
        hi = offsets[t + 1]
        if lo == hi:
            continue
        m = hi - lo
        kk = np.empty(m, dtype=np.int64)
        ws = np.empty(m)
        Ts = np.empty(m)
        dxs = np.empty(m)
        dys = np.empty(m)
        for row in range(ty * ts, min((ty + 1) * ts, H)):
            for col in range(tx * ts, min((tx + 1) * ts, W)):
                gp = dimg[row, col]
                if gp == 0.0:
                    continue
                T = 1.0
                n = 0
                for k in range(lo, hi):
                    i = inst[k]
                    dx = _wrap(col - mean[i, 0], W)
                    dy = row - mean[i, 1]
                    q = conic[i, 0, 0] * dx * dx + (conic[i, 0, 1] + conic[i, 1, 0]) * dx * dy \
                        + conic[i, 1, 1] * dy * dy
                    if q > cutoff2:
                        continue
                    w = np.exp(-0.5 * q)
                    kk[n] = k
                    ws[n] = w
                    Ts[n] = T
                    dxs[n] = dx
                    dys[n] = dy
                    n += 1
                    if literal:
                        T *= delta[i]
                    else:
                        T *= 1.0 - (1.0 - delta[i]) * w
                    if T < floor:
                        break
                S = 0.0
                for c in range(n - 1, -1, -1):
                    k = kk[c]
                    i = inst[k]
                    w = ws[c]
                    Tc = Ts[c]
                    s = sig[i]
                    d = delta[i]
                    if literal:
                        d_s = w * Tc
                        d_w = s * Tc
                        d_d = Tc * S
                        S = w * s + d * S
                    else:
                        a = (1.0 - d) * w
                        d_a = Tc * (s - S)
                        d_s = a * Tc
                        d_w = (1.0 - d) * d_a
                        d_d = -w * d_a
                        S = a * s + (1.0 - a) * S
                    dx = dxs[c]
                    dy = dys[c]
                    # w = exp(-q/2), q = dx^2 A00 + dx dy (A01 + A10) + dy^2 A11
                    dq = -0.5 * w * d_w * gp
                    a01 = conic[i, 0, 1] + conic[i, 1, 0]
                    g[k, 0] += dq * -(2.0 * conic[i, 0, 0] * dx + a01 * dy)
                    g[k, 1] += dq * -(a01 * dx + 2.0 * conic[i, 1, 1] * dy)
                    g[k, 2] += dq * dx * dx
                    g[k, 3] += dq * dx * dy
                    g[k, 4] += dq * dx * dy
                    g[k, 5] += dq * dy * dy
                    g[k, 6] += d_d * gp
                    g[k, 7] += d_s * gp
    return g


@njit(cache=True)
def _reduce(inst, g, n):
    out = np.zeros((n, 8))
    for k in range(inst.shape[0]):
        i = inst[k]
        for c in range(8):
            out[i, c] += g[k, c]
    return out


def bin_splats(splats, W: int, H: int, cfg: RenderConfig = RenderConfig()) -> TileBins:
    """Depth/id sort and per-tile instance lists."""
    depth = np.asarray(splats.depth, dtype=float)
    order = np.lexsort((_ids(splats), depth)).astype(np.int64)
    mean = np.ascontiguousarray(splats.pixel_mean, dtype=float).reshape(-1, 2)
    cov = np.ascontiguousarray(splats.cov2d, dtype=float).reshape(-1, 2, 2)
    ts = int(cfg.tile_size)
    ntx = -(-W // ts)
    nty = -(-H // ts)
    cutoff = min(float(cfg.cutoff), 1e150)
    offsets, inst = _bin(order, mean, cov, W, H, ts, ntx, nty, cutoff)
    return TileBins(order, offsets, inst, _inverse2(cov) if len(cov) else cov, ts, ntx, nty)


def render(splats, delta, sig, W: int, H: int, cfg: RenderConfig = RenderConfig(), bins=None) -> np.ndarray:
    """Composite splats into an ``H x W`` image (normalised PAS units)."""
    delta = np.ascontiguousarray(delta, dtype=float)
    sig = np.ascontiguousarray(sig, dtype=float)
    _check(splats, delta, sig, W, H)
    if len(delta) == 0:
        return np.zeros((H, W))
    if bins is None:
        bins = bin_splats(splats, W, H, cfg)
    mean = np.ascontiguousarray(splats.pixel_mean, dtype=float)
    return _forward(bins.offsets, bins.instances, mean, bins.conic, delta, sig, W, H,
                    bins.tile_size, bins.ntx, bins.nty, _cut2(cfg),
                    float(cfg.transmittance_floor), cfg.mode == "paper_literal")


def _cut2(cfg):
    return float(cfg.cutoff) ** 2 if cfg.cutoff < 1e150 else np.inf


def render_backward(splats, delta, sig, W: int, H: int, cfg: RenderConfig, d_image, bins=None):
    """Reverse-mode gradients of :func:`render`.

    Returns ``(d_delta, d_sig, d_pixel_mean, d_cov2d)``.
    """
    delta = np.ascontiguousarray(delta, dtype=float)
    sig = np.ascontiguousarray(sig, dtype=float)
    _check(splats, delta, sig, W, H)
    d_image = np.ascontiguousarray(d_image, dtype=float)
    if d_image.shape != (H, W):
        raise ValueError(f"d_image must have shape {(H, W)}, got {d_image.shape}")
    m = len(delta)
    if m == 0:
        return np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2, 2))
    if bins is None:
        bins = bin_splats(splats, W, H, cfg)
    mean = np.ascontiguousarray(splats.pixel_mean, dtype=float)
    g_inst = _backward(bins.offsets, bins.instances, mean, bins.conic, delta, sig, d_image, W, H,
                       bins.tile_size, bins.ntx, bins.nty, _cut2(cfg),
                       float(cfg.transmittance_floor), cfg.mode == "paper_literal")
    g = _reduce(bins.instances, g_inst, m)
    d_conic = g[:, 2:6].reshape(m, 2, 2)
    A = bins.conic
    At = np.swapaxes(A, 1, 2)
    d_cov = -np.einsum("nij,njk,nkl->nil", At, d_conic, At)
    return g[:, 6].copy(), g[:, 7].copy(), g[:, 0:2].copy(), d_cov


def render_bruteforce(splats, delta, sig, W: int, H: int, mode: str = "alpha") -> np.ndarray:
    """Reference renderer: every splat at every pixel, one global depth order."""
    delta = np.asarray(delta, dtype=float)
    sig = np.asarray(sig, dtype=float)
    _check(splats, delta, sig, W, H)
    if len(delta) == 0:
        return np.zeros((H, W))
    order = np.lexsort((_ids(splats), np.asarray(splats.depth)))
    mean = np.asarray(splats.pixel_mean, dtype=float)[order]
    A = np.linalg.inv(np.asarray(splats.cov2d, dtype=float)[order])
    d, s = delta[order], sig[order]
    rows, cols = np.mgrid[0:H, 0:W].astype(float)
    dx = cols[None] - mean[:, 0, None, None]
    dx = dx - W * np.floor((dx + 0.5 * W) / W)
    dy = rows[None] - mean[:, 1, None, None]
    q = (A[:, 0, 0, None, None] * dx * dx + (A[:, 0, 1] + A[:, 1, 0])[:, None, None] * dx * dy
         + A[:, 1, 1, None, None] * dy * dy)
    w = np.exp(-0.5 * q)
    if mode == "paper_literal":
        through = np.broadcast_to(d[:, None, None], w.shape)
        emit = w * s[:, None, None]
    else:
        alpha = (1.0 - d)[:, None, None] * w
        through = 1.0 - alpha
        emit = alpha * s[:, None, None]
    T = np.cumprod(np.concatenate([np.ones((1, H, W)), through[:-1]]), axis=0)
    return np.sum(T * emit, axis=0)
