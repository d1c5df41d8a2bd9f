import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbgs.gaussians import (COV2D_REG, GaussianCloud, direction_to_pixel, init_from_points,
                            pixel_hessian, pixel_jacobian, pixel_to_direction, project,
                            project_backward, quat_to_rotmat, sample_scene_points)
from wbgs.scene import RxPose

W, H = 360, 90


def random_hemisphere(rng, n):
    d = rng.normal(size=(n, 3))
    d[:, 2] = np.abs(d[:, 2])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def angle_between(a, b):
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def test_direction_to_pixel_examples():
    assert np.allclose(direction_to_pixel([0, 0, 1], W, H), [180, 0])
    px, py = direction_to_pixel([1, 0, 0], W, H)
    assert px == 180 and py < 90 and py == pytest.approx(90, abs=1e-9)
    assert direction_to_pixel([0, 1, 0], W, H)[0] == pytest.approx(270)
    with pytest.raises(ValueError):
        direction_to_pixel([0, 0, -0.5], W, H)


def test_round_trip_100k(rng):
    d = random_hemisphere(rng, 100_000)
    d = d[d[:, 2] > 1e-6]
    back = pixel_to_direction(direction_to_pixel(d, W, H), W, H)
    assert angle_between(d, back).max() < 1e-9


def test_azimuth_periodicity(rng):
    phi = rng.uniform(-np.pi, np.pi, 1000)
    th = rng.uniform(0.1, 1.5, 1000)
    a = np.stack([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.cos(th)], -1)
    b = np.stack([np.sin(th) * np.cos(phi + 2 * np.pi), np.sin(th) * np.sin(phi + 2 * np.pi), np.cos(th)], -1)
    pa, pb = direction_to_pixel(a, W, H)[:, 0], direction_to_pixel(b, W, H)[:, 0]
    diff = np.abs(pa - pb)
    assert np.all(np.minimum(diff, W - diff) < 1e-9)
    assert np.all((pa >= 0) & (pa < W))


def _fd_jacobian(v, h=1e-5):
    out = np.zeros((len(v), 2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        p = direction_to_pixel(v + e, W, H)
        m = direction_to_pixel(v - e, W, H)
        d = p - m
        d[:, 0] -= W * np.round(d[:, 0] / W)
        out[:, :, k] = d / (2 * h)
    return out


def test_jacobian_matches_finite_differences(rng):
    v = random_hemisphere(rng, 1000) * rng.uniform(0.5, 4.0, (1000, 1))
    v[:, 2] = np.clip(v[:, 2], 0.05, None)
    keep = np.hypot(v[:, 0], v[:, 1]) > 0.05
    v = v[keep]
    J = pixel_jacobian(v, W, H)
    F = _fd_jacobian(v)
    rel = np.abs(J - F) / np.maximum(np.abs(J).max(axis=(1, 2), keepdims=True), 1e-12)
    assert rel.max() < 1e-6


def test_hessian_matches_finite_differences(rng):
    v = random_hemisphere(rng, 200) * 2.0
    v[:, 2] = np.clip(v[:, 2], 0.1, None)
    Hs = pixel_hessian(v, W, H)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (pixel_jacobian(v + e, W, H) - pixel_jacobian(v - e, W, H)) / (2 * h)
        assert np.allclose(Hs[..., k], fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


def test_init_from_points_examples():
    one = init_from_points([[1.0, 2.0, 3.0]])
    assert len(one) == 1 and one.scales[0] == pytest.approx([0.1] * 3)
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    c = init_from_points(cube)
    assert np.allclose(c.scales, 1.0)
    assert np.allclose(c.quats, [1, 0, 0, 0])
    assert np.allclose(c.delta_o, 0.1)
    c2 = init_from_points(cube)
    assert all(np.array_equal(a, b) for a, b in zip(c.arrays().values(), c2.arrays().values()))
    with pytest.raises(ValueError):
        init_from_points(np.zeros((0, 3)))


def test_sample_scene_points(box_room):
    pts = sample_scene_points(box_room, 200, 50, seed=3)
    assert pts.shape == (250, 3)
    assert np.all(pts >= box_room.lo - 1e-9) and np.all(pts <= box_room.hi + 1e-9)
    assert np.array_equal(pts, sample_scene_points(box_room, 200, 50, seed=3))


def _cloud(means, scale=0.1, quats=None):
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    n = len(means)
    q = np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else np.asarray(quats, dtype=float)
    return GaussianCloud(means, np.full((n, 3), np.log(scale)), q, np.zeros(n))


def test_project_culls_exactly_negative_z(rng):
    rx = RxPose((0.0, 0.0, 0.0))
    means = rng.normal(size=(500, 3))
    proj = project(_cloud(means), rx, W, H)
    assert set(proj.ids) == set(np.flatnonzero(means[:, 2] >= 0))
    assert np.all(proj.depth > 0)
    assert np.allclose(proj.depth, np.linalg.norm(means[proj.ids], axis=1))


def test_isotropic_gaussian_near_horizon_is_isotropic_in_pixels():
    # the equirectangular map has equal pixel densities per radian on the horizon
    # (W / 2pi = 2H / pi); at the zenith the azimuth axis is singular
    proj = project(_cloud([[2.0, 0.0, 0.001]], scale=0.01), RxPose((0.0, 0.0, 0.0)), W, H)
    ev = np.linalg.eigvalsh(proj.cov2d[0])
    assert ev.max() / ev.min() < 1.5


def test_doubling_scales_quadruples_cov(rng):
    means = random_hemisphere(rng, 50) * 3 + [0, 0, 0.5]
    c = _cloud(means, 0.05, quats=rng.normal(size=(50, 4)))
    a = project(c, RxPose((0.0, 0.0, 0.0)), W, H)
    c.log_scales += np.log(2.0)
    b = project(c, RxPose((0.0, 0.0, 0.0)), W, H)
    assert np.allclose(b.cov2d - COV2D_REG * np.eye(2), 4 * (a.cov2d - COV2D_REG * np.eye(2)), rtol=1e-12)


def test_cov2d_matches_world_linearisation(rng):
    # compare against J_world . Sigma_world . J_world^T with a rotated RX frame
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    Q *= np.sign(np.linalg.det(Q))
    rx = RxPose((0.3, -0.2, 0.1), tuple(map(tuple, Q)))
    means = rng.normal(size=(100, 3)) * 2
    q = rng.normal(size=(100, 4))
    c = GaussianCloud(means, rng.normal(-2, 0.3, (100, 3)), q, np.zeros(100))
    proj = project(c, rx, W, H)
    R = quat_to_rotmat(q[proj.ids] / np.linalg.norm(q[proj.ids], axis=1, keepdims=True))
    Sw = np.einsum("nij,nj,nkj->nik", R, np.exp(2 * c.log_scales[proj.ids]), R)
    h = 1e-6
    for n, i in enumerate(proj.ids[:20]):
        Jw = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            d = (direction_to_pixel(rx.to_local(means[i] + e), W, H)
                 - direction_to_pixel(rx.to_local(means[i] - e), W, H))
            d[0] -= W * np.round(d[0] / W)
            Jw[:, k] = d / (2 * h)
        ref = Jw @ Sw[n] @ Jw.T + COV2D_REG * np.eye(2)
        assert np.allclose(proj.cov2d[n], ref, rtol=1e-5, atol=1e-9)


def test_quat_to_rotmat_is_orthonormal(rng):
    q = rng.normal(size=(100, 4))
    R = quat_to_rotmat(q / np.linalg.norm(q, axis=1, keepdims=True))
    assert np.allclose(np.einsum("nji,njk->nik", R, R), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_project_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 4
    means = random_hemisphere(rng, n) * rng.uniform(1, 3, (n, 1))
    means[:, 2] = np.clip(means[:, 2], 0.2, None)
    means[:, 0] = np.where(np.abs(means[:, 0]) < 0.2, 0.2, means[:, 0])
    c = GaussianCloud(means, rng.normal(-2, 0.3, (n, 3)), rng.normal(size=(n, 4)), np.zeros(n))
    rx = RxPose((0.0, 0.0, 0.0))
    gp = rng.normal(size=(n, 2))
    gc = rng.normal(size=(n, 2, 2))

    def f(cl):
        p = project(cl, rx, W, H)
        return np.sum(p.pixel_mean * gp) + np.sum(p.cov2d * gc)

    proj = project(c, rx, W, H)
    dm, dl, dq = project_backward(proj, n, gp, gc)
    for name, g in (("means", dm), ("log_scales", dl), ("quats", dq)):
        arr = getattr(c, name)
        for idx in np.ndindex(arr.shape):
            h = 1e-6
            o = arr[idx]
            arr[idx] = o + h
            fp = f(c)
            arr[idx] = o - h
            fm = f(c)
            arr[idx] = o
            fd = (fp - fm) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx])) + 1e-6, (name, idx, fd, g[idx])
