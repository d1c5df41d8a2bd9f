"""Frequency-embedded EM feature network.

Two small MLPs evaluated per Gaussian:

* attenuation net: ``enc(P_G) ++ enc(P_TX) ++ enc(freq)`` -> hidden feature
  ``h`` and a residual attenuation ``delta_f = 0.5 tanh(.)``;
* radiance net: ``h ++ enc(freq)`` -> intensity ``sig = softplus(.)``.

Everything is plain numpy in float64 with a hand-written reverse pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GHZ = 1e9


@dataclass(frozen=True)
class EncodingConfig:
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (1.0, 1.0, 1.0)
    L_pos: int = 10
    L_freq: int = 6
    att_width: int = 128
    att_depth: int = 3
    h_dim: int = 64
    rad_width: int = 64
    rad_depth: int = 2

    def __post_init__(self):
        if self.L_pos < 1 or self.L_freq < 1:
            raise ValueError("L_pos and L_freq must be >= 1")

    @property
    def pos_dim(self) -> int:
        return 3 * (2 * self.L_pos + 1)

    @property
    def freq_dim(self) -> int:
        return 2 * self.L_freq + 1

    @property
    def in_dim(self) -> int:
        return 2 * self.pos_dim + self.freq_dim

    def layer_shapes(self) -> dict[str, tuple]:
        shapes = {}
        fan = self.in_dim
        for k in range(self.att_depth):
            shapes[f"att.W{k}"] = (fan, self.att_width)
            shapes[f"att.b{k}"] = (self.att_width,)
            fan = self.att_width
        shapes["att.Wh"] = (fan, self.h_dim)
        shapes["att.bh"] = (self.h_dim,)
        shapes["att.Wd"] = (fan, 1)
        shapes["att.bd"] = (1,)
        fan = self.h_dim + self.freq_dim
        for k in range(self.rad_depth):
            shapes[f"rad.W{k}"] = (fan, self.rad_width)
            shapes[f"rad.b{k}"] = (self.rad_width,)
            fan = self.rad_width
        shapes["rad.Ws"] = (fan, 1)
        shapes["rad.bs"] = (1,)
        return shapes


@dataclass
class EmNetParams:
    config: EncodingConfig
    arrays: dict
    clamped: int = field(default=0, compare=False)

    def copy(self) -> "EmNetParams":
        return EmNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.clamped)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def __getitem__(self, key):
        return self.arrays[key]


def init_params(config: EncodingConfig, seed: int = 0) -> EmNetParams:
    """He-uniform weights (``U(+-sqrt(6 / fan_in))``), zero biases; output heads use ``U(+-sqrt(1 / fan_in))``."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.layer_shapes().items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
            continue
        gain = 1.0 if name in ("att.Wh", "att.Wd", "rad.Ws") else 6.0
        bound = np.sqrt(gain / shape[0])
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return EmNetParams(config, arrays)


def encode(x, L: int) -> np.ndarray:
    """``(sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x))`` on the last axis."""
    x = np.asarray(x, dtype=float)
    ang = x[..., None] * (np.pi * 2.0 ** np.arange(L))
    out = np.empty(x.shape + (2 * L,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def encode_vec(x, L: int) -> np.ndarray:
    """Per-component encodings of ``x`` (N, d) concatenated, raw ``x`` appended."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    return np.concatenate([encode(x, L).reshape(n, d * 2 * L), x], axis=1)


def _encode_vec_vjp(x, L, d_out):
    n, d = x.shape
    scale = np.pi * 2.0 ** np.arange(L)
    ang = x[..., None] * scale
    g = d_out[:, : d * 2 * L].reshape(n, d, 2 * L)
    dx = np.sum(g[..., 0::2] * np.cos(ang) * scale - g[..., 1::2] * np.sin(ang) * scale, axis=-1)
    return dx + d_out[:, d * 2 * L:]


def normalize_position(p, config: EncodingConfig):
    lo = np.asarray(config.lo, dtype=float)
    hi = np.asarray(config.hi, dtype=float)
    return 2.0 * (np.asarray(p, dtype=float) - lo) / (hi - lo) - 1.0, 2.0 / (hi - lo)


def normalize_frequency(f):
    return np.log10(np.asarray(f, dtype=float) / GHZ) / 2.0


def _relu(x):
    return np.maximum(x, 0.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(params: EmNetParams, P_G, P_TX, freq, return_cache: bool = False):
    """Evaluate the network for N Gaussians.

    ``P_TX`` may be a single 3-vector or (N, 3); ``freq`` a scalar or (N,).
    Returns ``(h, delta_f, sig)`` and optionally the cache for :func:`backward`.
    Inputs outside the normalisation ranges are clamped and counted in
    ``params.clamped``.
    """
    cfg = params.config
    A = params.arrays
    for v in A.values():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite network parameter")
    P_G = np.atleast_2d(np.asarray(P_G, dtype=float))
    n = len(P_G)
    P_TX = np.broadcast_to(np.asarray(P_TX, dtype=float), (n, 3))
    freq = np.broadcast_to(np.asarray(freq, dtype=float), (n,))

    xg_raw, sg = normalize_position(P_G, cfg)
    xt_raw, st = normalize_position(P_TX, cfg)
    u_raw = normalize_frequency(freq)[:, None]
    xg = np.clip(xg_raw, -1.0, 1.0)
    xt = np.clip(xt_raw, -1.0, 1.0)
    u = np.clip(u_raw, 0.0, 1.0)
    params.clamped += int(np.count_nonzero(xg != xg_raw) + np.count_nonzero(xt != xt_raw)
                          + np.count_nonzero(u != u_raw))
    ef = encode_vec(u, cfg.L_freq)
    z = np.concatenate([encode_vec(xg, cfg.L_pos), encode_vec(xt, cfg.L_pos), ef], axis=1)

    acts = [z]
    a = z
    for k in range(cfg.att_depth):
        a = _relu(a @ A[f"att.W{k}"] + A[f"att.b{k}"])
        acts.append(a)
    h = a @ A["att.Wh"] + A["att.bh"]
    t = np.tanh((a @ A["att.Wd"] + A["att.bd"])[:, 0])
    delta_f = 0.5 * t

    r = np.concatenate([h, ef], axis=1)
    racts = [r]
    for k in range(cfg.rad_depth):
        r = _relu(r @ A[f"rad.W{k}"] + A[f"rad.b{k}"])
        racts.append(r)
    raw = (r @ A["rad.Ws"] + A["rad.bs"])[:, 0]
    sig = _softplus(raw)
    if not return_cache:
        return h, delta_f, sig
    cache = dict(xg=xg, xt=xt, u=u, mg=(xg == xg_raw), mt=(xt == xt_raw), mu=(u == u_raw),
                 sg=sg, st=st, freq=freq, acts=acts, racts=racts, t=t, raw=raw, n=n)
    return h, delta_f, sig, cache


def backward(params: EmNetParams, cache, d_h, d_delta_f, d_sig):
    """Reverse pass. Returns ``(param_grads, (d_P_G, d_P_TX, d_freq))``."""
    cfg = params.config
    A = params.arrays
    n = cache["n"]
    d_h = np.broadcast_to(np.asarray(d_h, dtype=float), (n, cfg.h_dim))
    d_delta_f = np.broadcast_to(np.asarray(d_delta_f, dtype=float), (n,))
    d_sig = np.broadcast_to(np.asarray(d_sig, dtype=float), (n,))
    grads = {}

    d_raw = (d_sig * _sigmoid(cache["raw"]))[:, None]
    racts = cache["racts"]
    grads["rad.Ws"] = racts[-1].T @ d_raw
    grads["rad.bs"] = d_raw.sum(axis=0)
    g = d_raw @ A["rad.Ws"].T
    for k in range(cfg.rad_depth - 1, -1, -1):
        g = g * (racts[k + 1] > 0)
        grads[f"rad.W{k}"] = racts[k].T @ g
        grads[f"rad.b{k}"] = g.sum(axis=0)
        g = g @ A[f"rad.W{k}"].T
    d_h_total = d_h + g[:, : cfg.h_dim]
    d_ef = g[:, cfg.h_dim:]

    acts = cache["acts"]
    d_dr = (d_delta_f * 0.5 * (1.0 - cache["t"] ** 2))[:, None]
    grads["att.Wh"] = acts[-1].T @ d_h_total
    grads["att.bh"] = d_h_total.sum(axis=0)
    grads["att.Wd"] = acts[-1].T @ d_dr
    grads["att.bd"] = d_dr.sum(axis=0)
    g = d_h_total @ A["att.Wh"].T + d_dr @ A["att.Wd"].T
    for k in range(cfg.att_depth - 1, -1, -1):
        g = g * (acts[k + 1] > 0)
        grads[f"att.W{k}"] = acts[k].T @ g
        grads[f"att.b{k}"] = g.sum(axis=0)
        g = g @ A[f"att.W{k}"].T
    pd = cfg.pos_dim
    d_xg = _encode_vec_vjp(cache["xg"], cfg.L_pos, g[:, :pd]) * cache["mg"]
    d_xt = _encode_vec_vjp(cache["xt"], cfg.L_pos, g[:, pd:2 * pd]) * cache["mt"]
    d_ef = d_ef + g[:, 2 * pd:]
    d_u = _encode_vec_vjp(cache["u"], cfg.L_freq, d_ef)[:, 0] * cache["mu"][:, 0]
    d_P_G = d_xg * cache["sg"]
    d_P_TX = d_xt * cache["st"]
    d_freq = d_u / (2.0 * np.log(10.0) * cache["freq"])
    grads = {k: grads[k] for k in A}
    return grads, (d_P_G, d_P_TX, d_freq)
