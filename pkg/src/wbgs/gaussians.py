"""3D Gaussian cloud and its projection onto the RX hemisphere.

Pixel convention: pixel ``(row, col)`` has its centre at continuous
coordinates ``(p_y, p_x) = (row, col)``. Azimuth is periodic in ``p_x``;
row 0 is the boresight (zenith of the hemisphere).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import RxPose, Scene

COV2D_REG = 1e-6
DELTA_INIT = 0.1
FALLBACK_SCALE = 0.1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def direction_to_pixel(d, W: int, H: int) -> np.ndarray:
    """Map RX-frame directions (..., 3) to continuous pixels (..., 2) as ``(p_x, p_y)``."""
    d = np.asarray(d, dtype=float)
    if np.any(d[..., 2] < -1e-9):
        raise ValueError("direction lies below the RX hemisphere (z < 0)")
    r = np.linalg.norm(d, axis=-1)
    phi = np.arctan2(d[..., 1], d[..., 0])
    theta = np.arccos(np.clip(d[..., 2] / r, -1.0, 1.0))
    px = np.mod((phi + np.pi) / (2.0 * np.pi) * W, W)
    py = np.clip(theta / (np.pi / 2.0) * H, 0.0, np.nextafter(float(H), 0.0))
    return np.stack([px, py], axis=-1)


def pixel_to_direction(p, W: int, H: int) -> np.ndarray:
    """Inverse of :func:`direction_to_pixel` for in-range pixels."""
    p = np.asarray(p, dtype=float)
    phi = p[..., 0] / W * 2.0 * np.pi - np.pi
    theta = p[..., 1] / H * (np.pi / 2.0)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def pixel_jacobian(v, W: int, H: int) -> np.ndarray:
    """d(p_x, p_y)/d(v) for local, unnormalised vectors ``v`` (M, 3) -> (M, 2, 3)."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    rho2 = np.maximum(x * x + y * y, 1e-300)
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    sx = W / (2.0 * np.pi)
    sy = 2.0 * H / np.pi
    J = np.empty((len(v), 2, 3))
    J[:, 0, 0] = -y / rho2 * sx
    J[:, 0, 1] = x / rho2 * sx
    J[:, 0, 2] = 0.0
    g = z / (r2 * rho)
    J[:, 1, 0] = x * g * sy
    J[:, 1, 1] = y * g * sy
    J[:, 1, 2] = -rho / r2 * sy
    return J


def pixel_hessian(v, W: int, H: int) -> np.ndarray:
    """Second derivatives: ``out[m, a, i, k] = d J[m, a, i] / d v[m, k]``."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    rho2 = np.maximum(x * x + y * y, 1e-300)
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    r4 = r2 * r2
    rho4 = rho2 * rho2
    sx = W / (2.0 * np.pi)
    sy = 2.0 * H / np.pi
    out = np.zeros((len(v), 2, 3, 3))
    # azimuth row: (-y/rho2, x/rho2, 0)
    out[:, 0, 0, 0] = 2 * x * y / rho4
    out[:, 0, 0, 1] = (y * y - x * x) / rho4
    out[:, 0, 1, 0] = (y * y - x * x) / rho4
    out[:, 0, 1, 1] = -2 * x * y / rho4
    out[:, 0] *= sx
    # zenith row: (x g, y g, -rho/r2) with g = z / (r2 rho)
    g = z / (r2 * rho)
    k = -z * (2 * rho2 + r2) / (r4 * rho * rho2)
    dg = np.stack([x * k, y * k, (r2 - 2 * z * z) / (r4 * rho)], axis=-1)
    out[:, 1, 0, :] = x[:, None] * dg
    out[:, 1, 0, 0] += g
    out[:, 1, 1, :] = y[:, None] * dg
    out[:, 1, 1, 1] += g
    c = (2 * rho2 - r2) / (rho * r4)
    out[:, 1, 2, 0] = x * c
    out[:, 1, 2, 1] = y * c
    out[:, 1, 2, 2] = 2 * rho * z / r4
    out[:, 1] *= sy
    return out


def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternions (N, 4) ordered (w, x, y, z) to rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_vjp(q, dR) -> np.ndarray:
    """Pull a gradient on R(q) back to the (unit) quaternion q."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)

    def m(*rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = m((zero, -2 * z, 2 * y), (2 * z, zero, -2 * x), (-2 * y, 2 * x, zero))
    dx = m((zero, 2 * y, 2 * z), (2 * y, -4 * x, -2 * w), (2 * z, 2 * w, -4 * x))
    dy = m((-4 * y, 2 * x, 2 * w), (2 * x, zero, 2 * z), (-2 * w, 2 * z, -4 * y))
    dz = m((-4 * z, -2 * w, 2 * x), (2 * w, -4 * z, 2 * y), (2 * x, 2 * y, zero))
    return np.stack([np.einsum("nij,nij->n", dR, d) for d in (dw, dx, dy, dz)], axis=-1)


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian parameters.

    ``log_scales`` are per-axis log standard deviations and ``delta_latent``
    is the logit of the base attenuation ``delta_o``.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    delta_latent: np.ndarray

    def __post_init__(self):
        n = len(self.means)
        if not (len(self.log_scales) == len(self.quats) == len(self.delta_latent) == n):
            raise ValueError("GaussianCloud arrays must have equal length")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def count(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def delta_o(self) -> np.ndarray:
        return sigmoid(self.delta_latent)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "log_scales": self.log_scales,
                "quats": self.quats, "delta_latent": self.delta_latent}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()})

    def take(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.arrays().items()})

    @classmethod
    def concat(cls, parts) -> "GaussianCloud":
        keys = ("means", "log_scales", "quats", "delta_latent")
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in keys})

    def normalize_quats(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)


def init_from_points(points, seed: int = 0) -> GaussianCloud:
    """One isotropic Gaussian per point, scaled by the mean distance to its (up to 3) nearest neighbours."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("init_from_points needs at least one point")
    n = len(pts)
    if n == 1:
        scale = np.array([FALLBACK_SCALE])
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        scale = dist[:, 1:].mean(axis=1)
        scale = np.where(scale > 0, scale, FALLBACK_SCALE)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        means=pts.copy(),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats=quats,
        delta_latent=np.full(n, float(logit(DELTA_INIT))),
    )


def sample_scene_points(scene: Scene, n_surface: int = 2000, n_volume: int = 500, seed: int = 0) -> np.ndarray:
    """Area-weighted points on every surface plus uniform free-space points."""
    rng = np.random.default_rng(seed)
    surfaces = scene.surfaces
    pts = []
    if surfaces and n_surface > 0:
        areas = np.array([s.area() for s in surfaces])
        which = rng.choice(len(surfaces), size=n_surface, p=areas / areas.sum())
        uv = rng.uniform(size=(n_surface, 2))
        for i, (u, w) in zip(which, uv):
            c = surfaces[i].points
            # bilinear patch; exact for the planar rectangles used here
            pts.append((1 - u) * (1 - w) * c[0] + u * (1 - w) * c[1] + u * w * c[2] + (1 - u) * w * c[3])
    drawn = 0
    while drawn < n_volume:
        p = rng.uniform(scene.lo, scene.hi)
        if scene.in_solid(p):
            continue
        pts.append(p)
        drawn += 1
    return np.asarray(pts, dtype=float).reshape(-1, 3)


@dataclass
class Projection:
    """Visible splats (``ids`` index the cloud) plus what the backward pass needs."""

    ids: np.ndarray
    pixel_mean: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    local: np.ndarray
    jac: np.ndarray
    sigma_local: np.ndarray
    rot: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    var: np.ndarray
    frame: np.ndarray
    W: int
    H: int

    def __len__(self) -> int:
        return len(self.ids)


def project(cloud: GaussianCloud, rx: RxPose, W: int, H: int) -> Projection:
    frame = rx.rotation
    local_all = rx.to_local(cloud.means)
    ids = np.flatnonzero(local_all[:, 2] >= 0.0)
    v = local_all[ids]
    depth = np.linalg.norm(v, axis=1)
    pix = direction_to_pixel(v, W, H) if len(ids) else np.zeros((0, 2))
    q = cloud.quats[ids]
    qn = np.linalg.norm(q, axis=1)
    qu = q / qn[:, None]
    R = quat_to_rotmat(qu)
    var = np.exp(2.0 * cloud.log_scales[ids])
    sigma_w = np.einsum("nij,nj,nkj->nik", R, var, R)
    sigma_l = np.einsum("ji,njk,kl->nil", frame, sigma_w, frame)
    J = pixel_jacobian(v, W, H)
    cov = np.einsum("nai,nij,nbj->nab", J, sigma_l, J) + COV2D_REG * np.eye(2)
    return Projection(ids, pix, cov, depth, v, J, sigma_l, R, qu, qn, var, frame, W, H)


def project_backward(proj: Projection, n_total: int, d_pixel_mean, d_cov2d):
    """Gradients of (pixel_mean, cov2d) pulled back to (means, log_scales, quats)."""
    J, S = proj.jac, proj.sigma_local
    d_means = np.zeros((n_total, 3))
    d_log_scales = np.zeros((n_total, 3))
    d_quats = np.zeros((n_total, 4))
    if len(proj) == 0:
        return d_means, d_log_scales, d_quats
    G = np.asarray(d_cov2d)
    Gs = G + np.swapaxes(G, 1, 2)
    d_J = np.einsum("nab,nbj,nji->nai", Gs, J, S)
    d_S = np.einsum("nai,nab,nbj->nij", J, G, J)
    d_v = np.einsum("nai,na->ni", J, d_pixel_mean)
    d_v += np.einsum("nai,naik->nk", d_J, pixel_hessian(proj.local, proj.W, proj.H))
    F = proj.frame
    d_means[proj.ids] = d_v @ F.T
    d_Sw = np.einsum("ij,njk,lk->nil", F, d_S, F)
    R = proj.rot
    d_Sw_sym = d_Sw + np.swapaxes(d_Sw, 1, 2)
    d_R = np.einsum("nij,njk,nk->nik", d_Sw_sym, R, proj.var)
    d_var = np.einsum("nji,njk,nki->ni", R, d_Sw, R)
    d_log_scales[proj.ids] = d_var * 2.0 * proj.var
    d_qu = _rotmat_vjp(proj.quat_unit, d_R)
    qu = proj.quat_unit
    d_q = (d_qu - qu * np.sum(qu * d_qu, axis=1, keepdims=True)) / proj.quat_norm[:, None]
    d_quats[proj.ids] = d_q
    return d_means, d_log_scales, d_quats
