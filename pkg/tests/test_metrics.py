import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbgs.metrics import l1_ssim_loss, ssim, ssim_grad


def test_identity_and_symmetry(rng):
    for _ in range(5):
        a, b = rng.uniform(size=(2, 20, 30))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_constant_images_closed_form():
    c1 = 1e-4
    # variances vanish so the structure factor is exactly 1
    expected = (2 * 0.5 * 0.25 + c1) / (0.5**2 + 0.25**2 + c1)
    assert ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.25)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8001, abs=1e-4)


def test_matches_brute_force_windows(rng):
    a, b = rng.uniform(size=(2, 14, 17))
    x = np.arange(11) - 5.0
    g = np.exp(-0.5 * (x / 1.5) ** 2)
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(14 - 10):
        for j in range(17 - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * pa * pa).sum() - ma * ma
            vb = (w * pb * pb).sum() - mb * mb
            cov = (w * pa * pb).sum() - ma * mb
            vals.append((2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma**2 + mb**2 + 1e-4) * (va + vb + 9e-4)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-13)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ValueError):
        l1_ssim_loss(np.zeros((16, 16)), np.zeros((15, 16)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_loss_examples(rng):
    x = rng.uniform(size=(16, 16))
    v, g = l1_ssim_loss(x, x)
    assert v == pytest.approx(0.0, abs=1e-12)
    y = rng.uniform(size=(16, 16))
    v0, _ = l1_ssim_loss(x, y, lam=0.0)
    assert v0 == np.mean(np.abs(x - y))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_loss_gradient_matches_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 16, 16))
    _, g = l1_ssim_loss(a, b, lam)
    h = 1e-6
    for idx in [tuple(rng.integers(0, 16, 2)) for _ in range(12)]:
        o = a[idx]
        a[idx] = o + h
        p, _ = l1_ssim_loss(a, b, lam)
        a[idx] = o - h
        m, _ = l1_ssim_loss(a, b, lam)
        a[idx] = o
        fd = (p - m) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-5 * max(abs(fd), abs(g[idx])) + 1e-10


def test_ssim_grad_value_consistent(rng):
    a, b = rng.uniform(size=(2, 20, 20))
    v, _ = ssim_grad(a, b)
    assert v == ssim(a, b)
