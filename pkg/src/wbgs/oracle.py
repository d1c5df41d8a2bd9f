"""Ground-truth PAS generation by image-source ray tracing.

Paths combine incoherently. Each specular bounce multiplies the path power by
the reflectance of the surface, each surface a segment passes through
multiplies it by the slab transmittance, and shadowed flagged edges add a
knife-edge diffracted path. A Gaussian angular kernel stands in for the
receive beam pattern.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (DatasetManifest, SampleRecord, norm_from_peak, write_manifest,
                      write_sample)
from .em_physics import (fresnel_parameter, free_space_path_loss, knife_edge_loss,
                         physical_coefficients)
from .gaussians import direction_to_pixel
from .scene import Scene, write_scene

_EPS_T = 1e-9
_TOL = 1e-9


@dataclass(frozen=True)
class PropPath:
    arrival_direction: tuple
    power: float
    bounce_count: int
    tags: tuple = ()


@dataclass
class PasImage:
    values: np.ndarray
    tx: tuple = (0.0, 0.0, 0.0)
    freq: float = 0.0

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]


class _Geometry:
    """Vectorised quad tests over all scene surfaces."""

    def __init__(self, scene: Scene):
        self.surfaces = scene.surfaces
        self.materials = [scene.material(s.material) for s in self.surfaces]
        self.corners = np.array([s.points for s in self.surfaces]).reshape(-1, 4, 3)
        self.normals = np.array([s.normal for s in self.surfaces]).reshape(-1, 3)
        self.offsets = np.einsum("sj,sj->s", self.normals, self.corners[:, 0]) if len(self.surfaces) else np.zeros(0)
        self.edges = np.roll(self.corners, -1, axis=1) - self.corners

    def _inside(self, idx, x):
        c = self.corners[idx]
        e = self.edges[idx]
        n = self.normals[idx]
        side = np.einsum("...kj,...j->...k", np.cross(e, x[..., None, :] - c), n)
        return np.all(side >= -_TOL, axis=-1)

    def crossings(self, p0, p1, exclude=()):
        """Surfaces strictly crossed by the open segment p0 -> p1, with incidence angles."""
        if not len(self.surfaces):
            return []
        d = p1 - p0
        denom = self.normals @ d
        num = self.offsets - self.normals @ p0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        ok = (np.abs(denom) > 1e-15) & (t > _EPS_T) & (t < 1.0 - _EPS_T)
        for e in exclude:
            ok[e] = False
        idx = np.flatnonzero(ok)
        if not len(idx):
            return []
        x = p0 + t[idx, None] * d
        hit = idx[self._inside(idx, x)]
        length = np.linalg.norm(d)
        out = []
        for s in hit:
            cos_i = abs(denom[s]) / length
            out.append((int(s), math.acos(min(1.0, cos_i))))
        return out

    def mirror(self, p, s):
        n = self.normals[s]
        return p - 2.0 * (n @ p - self.offsets[s]) * n

    def intersect(self, p0, p1, s):
        """Point where segment p0 -> p1 meets surface ``s`` or None."""
        n = self.normals[s]
        d = p1 - p0
        denom = n @ d
        if abs(denom) < 1e-15:
            return None
        t = (self.offsets[s] - n @ p0) / denom
        if not (_EPS_T < t < 1.0 - _EPS_T):
            return None
        x = p0 + t * d
        if not self._inside(np.array([s]), x[None])[0]:
            return None
        return x


def _transmission(geo, segs, freq, exclude_per_seg):
    gain = 1.0
    for (a, b), excl in zip(segs, exclude_per_seg):
        for s, theta in geo.crossings(a, b, excl):
            if theta >= math.pi / 2:
                continue
            gain *= physical_coefficients(geo.materials[s], freq, theta).T
            if gain == 0.0:
                return 0.0
    return gain


def _fspl_gain(d, freq):
    return 10.0 ** (-free_space_path_loss(d, freq) / 10.0)


def _diffracting_edges(scene: Scene):
    seen = {}
    for s in scene.surfaces:
        pts = s.points
        for k, flag in enumerate(s.diffracting_edges):
            if not flag:
                continue
            a, b = pts[k], pts[(k + 1) % 4]
            key = tuple(sorted((tuple(np.round(a, 9)), tuple(np.round(b, 9)))))
            seen.setdefault(key, (a, b))
    return [seen[k] for k in sorted(seen)]


def _edge_point(a, b, tx, rx):
    """Point on segment ab minimising |tx - P| + |P - rx|."""
    u = b - a
    L = np.linalg.norm(u)
    u = u / L
    t1, t2 = (tx - a) @ u, (rx - a) @ u
    r1 = np.linalg.norm(tx - a - t1 * u)
    r2 = np.linalg.norm(rx - a - t2 * u)
    t = t1 + (t2 - t1) * (r1 / (r1 + r2) if r1 + r2 > 0 else 0.5)
    return a + min(max(t, 0.0), L) * u


def trace_paths(scene: Scene, tx, freq: float, max_bounces: int = 2) -> list[PropPath]:
    """Enumerate LOS, specular (image-source) and knife-edge paths from ``tx`` to the RX."""
    if not 0 <= max_bounces <= 3:
        raise ValueError("max_bounces must lie in [0, 3]")
    tx = np.asarray(tx, dtype=float)
    if not scene.inside(tx):
        raise ValueError("tx lies outside the scene bounds")
    rx = np.asarray(scene.rx.position, dtype=float)
    geo = _Geometry(scene)
    paths: list[PropPath] = []

    def emit(last_point, power, bounces, tags):
        if not power > 0.0:
            return
        v = scene.rx.to_local(last_point)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return
        v = v / nv
        if v[2] < 0.0:
            return
        paths.append(PropPath(tuple(float(c) for c in v), float(power), bounces, tuple(tags)))

    # line of sight
    los_hits = geo.crossings(tx, rx)
    d = np.linalg.norm(tx - rx)
    emit(tx, _fspl_gain(d, freq) * _transmission(geo, [(tx, rx)], freq, [()]), 0, ())

    # specular reflections, image-source method
    n_surf = len(geo.surfaces)
    for k in range(1, max_bounces + 1):
        for seq in itertools.product(range(n_surf), repeat=k):
            if any(seq[i] == seq[i + 1] for i in range(k - 1)):
                continue
            images = [tx]
            for s in seq:
                images.append(geo.mirror(images[-1], s))
            pts = [None] * k
            target = rx
            valid = True
            for j in range(k - 1, -1, -1):
                x = geo.intersect(target, images[j + 1], seq[j])
                if x is None:
                    valid = False
                    break
                pts[j] = x
                target = x
            if not valid:
                continue
            chain = [tx] + pts + [rx]
            segs = list(zip(chain[:-1], chain[1:]))
            length = sum(np.linalg.norm(b - a) for a, b in segs)
            if length <= 0.0:
                continue
            gain = _fspl_gain(length, freq)
            for j, s in enumerate(seq):
                inc = chain[j + 1] - chain[j]
                cos_i = abs(geo.normals[s] @ inc) / np.linalg.norm(inc)
                theta = math.acos(min(1.0, cos_i))
                if theta >= math.pi / 2:
                    gain = 0.0
                    break
                gain *= physical_coefficients(geo.materials[s], freq, theta).R
            if gain == 0.0:
                continue
            excl = [(seq[0],)] + [(seq[j], seq[j + 1]) for j in range(k - 1)] + [(seq[-1],)]
            gain *= _transmission(geo, segs, freq, excl)
            emit(pts[-1], gain, k, ("reflect",) * k)

    # knife-edge diffraction around flagged edges, only in the shadow of the direct path
    if los_hits:
        lam_f = freq
        for a, b in _diffracting_edges(scene):
            p = _edge_point(a, b, tx, rx)
            if geo.crossings(tx, p) or geo.crossings(p, rx):
                continue
            d1 = np.linalg.norm(p - tx)
            d2 = np.linalg.norm(rx - p)
            if d1 <= 0 or d2 <= 0:
                continue
            u = (rx - tx) / d
            h = np.linalg.norm((p - tx) - ((p - tx) @ u) * u)
            v = fresnel_parameter(h, d1, d2, lam_f)
            gain = _fspl_gain(d1 + d2, freq) * 10.0 ** (-knife_edge_loss(v) / 10.0)
            emit(p, gain, 0, ("diffract",))

    paths.sort(key=lambda p: (-p.power, p.bounce_count, p.tags, p.arrival_direction))
    return paths


def synthesize_pas(paths, W: int = 360, H: int = 90, kernel_sigma: float = 8.0) -> PasImage:
    """Splat each path's power as a peak-normalised Gaussian blob (periodic in azimuth)."""
    if not kernel_sigma > 0:
        raise ValueError("kernel_sigma must be > 0")
    img = np.zeros((H, W))
    if not paths:
        return PasImage(img)
    dirs = np.array([p.arrival_direction for p in paths], dtype=float)
    power = np.array([p.power for p in paths], dtype=float)
    pix = direction_to_pixel(dirs, W, H)
    cols = np.arange(W, dtype=float)
    rows = np.arange(H, dtype=float)
    for (px, py), pw in zip(pix, power):
        dx = cols - px
        dx -= W * np.floor((dx + 0.5 * W) / W)
        dy = rows - py
        img += pw * np.exp(-0.5 * (dy[:, None] ** 2 + dx[None, :] ** 2) / kernel_sigma ** 2)
    return PasImage(img)


def simulate_sample(scene, tx, freq, W=360, H=90, kernel_sigma=8.0, max_bounces=2) -> PasImage:
    img = synthesize_pas(trace_paths(scene, tx, freq, max_bounces), W, H, kernel_sigma)
    img.tx = tuple(float(c) for c in tx)
    img.freq = float(freq)
    return img


def _simulate_job(args):
    scene, tx, freq, W, H, kernel_sigma, max_bounces = args
    return simulate_sample(scene, tx, freq, W, H, kernel_sigma, max_bounces).values.astype("<f4")


def generate_dataset(scene: Scene, tx_positions, freqs, out_dir, W: int = 360, H: int = 90,
                     kernel_sigma: float = 8.0, max_bounces: int = 2, workers: int = 1,
                     dynamic_range_db: float = 60.0) -> DatasetManifest:
    """Simulate every (tx, freq) pair and write samples plus ``manifest.json`` to ``out_dir``."""
    tx_positions = [tuple(float(c) for c in t) for t in tx_positions]
    freqs = [float(f) for f in freqs]
    if not tx_positions or not freqs:
        raise ValueError("tx_positions and freqs must be non-empty")
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create dataset directory ({exc})") from exc
    jobs = [(scene, tx, f, W, H, kernel_sigma, max_bounces) for tx in tx_positions for f in freqs]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(_simulate_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        images = [_simulate_job(j) for j in jobs]
    records = []
    peak = 0.0
    for i, (job, img) in enumerate(zip(jobs, images)):
        rel = f"samples/{i:06d}.f32"
        path = out / rel
        try:
            write_sample(img, path)
        except OSError as exc:
            raise OSError(f"{path}: {exc}") from exc
        peak = max(peak, float(img.max(initial=0.0)))
        records.append(SampleRecord(rel, job[1], job[2]))
    if peak <= 0.0:
        peak = 1e-20
    manifest = DatasetManifest(
        W=W, H=H, samples=records, norm=norm_from_peak(peak, dynamic_range_db),
        extra={"kernel_sigma": kernel_sigma, "max_bounces": max_bounces}, root=out,
    )
    write_scene(scene, out / manifest.scene_file)
    write_manifest(manifest, out / "manifest.json")
    return manifest
