import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wbgs.em_physics import (C, TotalInternalReflection, free_space_path_loss, fresnel_parameter,
                             knife_edge_loss, paper_literal_coefficients, physical_coefficients,
                             refraction_angle, wavenumber)
from wbgs.scene import ITU_MATERIALS, Material

from conftest import conductor


def test_fspl_examples():
    assert free_space_path_loss(1.0, C / (4 * math.pi)) == pytest.approx(0.0, abs=1e-12)
    # direct double-precision evaluation as the oracle
    ref = 20 * np.log10(4 * np.pi * 1.0 * 2.4e9 / 299792458.0)
    assert abs(free_space_path_loss(1.0, 2.4e9) - ref) < 1e-12
    assert abs(free_space_path_loss(1.0, 2.4e9) - 40.05) < 0.01
    assert free_space_path_loss(10.0, 2.4e9) - free_space_path_loss(1.0, 2.4e9) == pytest.approx(20.0, abs=1e-12)


@pytest.mark.parametrize("d,f", [(0.0, 1e9), (-1.0, 1e9), (1.0, 0.0), (1.0, -5.0)])
def test_fspl_domain(d, f):
    with pytest.raises(ValueError):
        free_space_path_loss(d, f)


@given(st.floats(0.01, 100.0), st.floats(0.1e9, 100e9), st.floats(0.1, 10.0))
def test_fspl_scaling(d, f, a):
    assert free_space_path_loss(a * d, f) - free_space_path_loss(d, f) == pytest.approx(20 * math.log10(a), abs=1e-12)


def test_wavenumber():
    assert wavenumber(C / (2 * math.pi)) == pytest.approx(1.0, rel=1e-15)
    assert wavenumber(1e9) == pytest.approx(20.958, abs=5e-4)
    assert wavenumber(2e9) == 2 * wavenumber(1e9)
    with pytest.raises(ValueError):
        wavenumber(0.0)


def test_paper_literal_examples():
    c = paper_literal_coefficients(1.0, 1.0)
    assert (c.R, c.T, c.A) == (0.0, 1.0, 0.0)
    c = paper_literal_coefficients(4.0, 1.0)
    assert c.R == pytest.approx(1 / 9, rel=1e-14)
    assert c.T == pytest.approx(16 / 9, rel=1e-14)
    assert c.A == pytest.approx(-8 / 9, rel=1e-14)
    assert paper_literal_coefficients(1e12, 1.0).R > 0.999
    with pytest.raises(ValueError):
        paper_literal_coefficients(-1.0, 1.0)


@given(st.floats(0.1, 10.0))
def test_paper_literal_conserves_only_when_matched(k):
    c = paper_literal_coefficients(k, k)
    assert c.R + c.T + c.A == pytest.approx(1.0, abs=1e-15)
    assert c.R == pytest.approx(0.0, abs=1e-15)


def test_physical_examples():
    pec = physical_coefficients(conductor(), 10e9, 0.3)
    assert (pec.R, pec.T, pec.A) == (1.0, 0.0, 0.0)
    thin = Material("d", 4.0, thickness=1e-12)
    c = physical_coefficients(thin, 5e9, 0.0)
    assert c.R == pytest.approx(1 / 9, abs=1e-12)
    assert c.T == pytest.approx(8 / 9, abs=1e-9)
    assert c.A == pytest.approx(0.0, abs=1e-9)
    vac = physical_coefficients(ITU_MATERIALS["vacuum"], 1e9, 0.7)
    assert vac.R == pytest.approx(0.0, abs=1e-15)
    assert vac.T == pytest.approx(1.0, abs=1e-15)


def test_physical_angle_domain():
    with pytest.raises(ValueError):
        physical_coefficients(ITU_MATERIALS["wood"], 1e9, math.pi / 2)
    with pytest.raises(ValueError):
        physical_coefficients(ITU_MATERIALS["wood"], 1e9, -0.1)


def test_physical_tir_case():
    # rarer-than-vacuum medium past the critical angle
    low = Material("low", 1.0, thickness=0.1, mu_r=0.25)
    c = physical_coefficients(low, 1e9, 1.2)
    assert (c.R, c.T, c.A) == (1.0, 0.0, 0.0)


materials = st.builds(Material, st.just("m"), st.floats(1.0, 80.0), st.floats(-0.5, 0.5),
                      st.floats(0.0, 50.0), st.floats(-1.0, 1.5), st.floats(0.2, 5.0), st.floats(1e-4, 1.0))


@given(materials, st.floats(0.1e9, 100e9), st.floats(0.0, math.pi / 2 - 1e-6))
def test_physical_conserves_energy(mat, f, theta):
    c = physical_coefficients(mat, f, theta)
    assert abs(c.R + c.T + c.A - 1.0) <= 1e-12
    for v in (c.R, c.T, c.A):
        assert -1e-15 <= v <= 1.0 + 1e-15


def test_refraction_examples():
    assert refraction_angle(0.0, 4.0, 1.0) == 0.0
    assert math.degrees(refraction_angle(math.radians(30), 4.0, 1.0)) == pytest.approx(14.4775, abs=1e-4)
    assert refraction_angle(0.4, 1.0, 1.0) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(TotalInternalReflection):
        refraction_angle(1.2, 0.25, 1.0)


@given(st.floats(0.01, 1.5), st.floats(1.0, 50.0), st.floats(1.01, 3.0))
def test_refraction_decreases_with_index(theta, eps, k):
    assert refraction_angle(theta, eps * k, 1.0) < refraction_angle(theta, eps, 1.0)


def test_knife_edge_examples():
    assert knife_edge_loss(-1.0) == 0.0
    assert knife_edge_loss(0.0) == pytest.approx(6.03, abs=0.01)
    assert knife_edge_loss(1.0) == pytest.approx(13.9, abs=0.05)
    # near-continuity at the threshold
    assert abs(knife_edge_loss(-0.78 + 1e-12) - 0.0) < 0.05


def test_knife_edge_monotone():
    v = np.linspace(-0.78, 20, 5001)
    j = np.array([knife_edge_loss(x) for x in v])
    assert np.all(np.diff(j) >= 0)


def test_fresnel_parameter_scaling():
    lam = C / 10e9
    assert fresnel_parameter(1.0, 2.0, 2.0, 10e9) == pytest.approx(math.sqrt(2 * 4 / (lam * 4)))
    assert fresnel_parameter(0.0, 1.0, 1.0, 1e9) == 0.0
