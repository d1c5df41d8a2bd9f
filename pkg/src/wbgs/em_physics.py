"""Closed-form, frequency dependent propagation quantities.

Two interface models are provided. :func:`physical_coefficients` is the
energy-conserving model used by the ground-truth tracer.
:func:`paper_literal_coefficients` evaluates the impedance-ratio formulas
verbatim; its transmission term is a squared field coefficient without the
impedance correction, so ``A = 1 - R - T`` can be negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.constants import epsilon_0, mu_0

from .scene import Material, material_at

C = 299792458.0
ETA_0 = math.sqrt(mu_0 / epsilon_0)


class TotalInternalReflection(ValueError):
    pass


@dataclass(frozen=True)
class InterfaceCoefficients:
    R: float
    T: float
    A: float


def _positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")


def free_space_path_loss(d: float, f: float) -> float:
    """Free-space path loss in dB, ``20 log10(4 pi d f / c)``."""
    _positive("d", d)
    _positive("f", f)
    return 20.0 * math.log10(4.0 * math.pi * d * f / C)


def wavenumber(f: float) -> float:
    _positive("f", f)
    return 2.0 * math.pi * f / C


def paper_literal_coefficients(eps_m, mu_m, eps_0=1.0, mu_0=1.0) -> InterfaceCoefficients:
    for name, v in (("eps_m", eps_m), ("mu_m", mu_m), ("eps_0", eps_0), ("mu_0", mu_0)):
        _positive(name, v)
    sm = math.sqrt(mu_m / eps_m)
    s0 = math.sqrt(mu_0 / eps_0)
    R = ((sm - s0) / (sm + s0)) ** 2
    T = (2.0 * s0 / (sm + s0)) ** 2
    return InterfaceCoefficients(R, T, 1.0 - R - T)


def refraction_angle(theta_i, eps_m, mu_m, eps_0=1.0, mu_0=1.0) -> float:
    """Snell refraction angle; entering a denser medium bends toward the normal.

    Raises :class:`TotalInternalReflection` past the critical angle.
    """
    s = math.sin(theta_i) / math.sqrt((eps_m * mu_m) / (eps_0 * mu_0))
    if s > 1.0:
        raise TotalInternalReflection(f"no refracted ray at theta_i={theta_i}")
    return math.asin(s)


def physical_coefficients(material: Material, freq: float, theta_i: float) -> InterfaceCoefficients:
    """Energy-conserving R/T/A of a lossy slab (TE convention).

    Reflection uses the complex intrinsic impedance of the medium; the power
    that enters is attenuated along the refracted path through ``thickness``
    and what is lost there counts as absorption, so ``R + T + A == 1``.
    """
    _positive("freq", freq)
    if not 0.0 <= theta_i < math.pi / 2:
        raise ValueError("theta_i must lie in [0, pi/2)")
    eps_r, mu_r, sigma = material_at(material, freq)
    if math.isinf(sigma):
        return InterfaceCoefficients(1.0, 0.0, 0.0)
    omega = 2.0 * math.pi * freq
    eps = epsilon_0 * eps_r
    mu = mu_0 * mu_r
    eta = np.sqrt(1j * omega * mu / (sigma + 1j * omega * eps))
    n = np.sqrt(mu_r * (eps_r - 1j * sigma / (omega * epsilon_0)))
    try:
        cos_t_geom = math.cos(refraction_angle(theta_i, eps_r, mu_r))
    except TotalInternalReflection:
        return InterfaceCoefficients(1.0, 0.0, 0.0)
    sin_t = math.sin(theta_i) / n
    cos_t = np.sqrt(1.0 - sin_t * sin_t)
    cos_i = math.cos(theta_i)
    gamma = (eta * cos_i - ETA_0 * cos_t) / (eta * cos_i + ETA_0 * cos_t)
    R = min(float(abs(gamma) ** 2), 1.0)
    alpha_p = float(np.sqrt(1j * omega * mu * (sigma + 1j * omega * eps)).real)
    survive = math.exp(-2.0 * alpha_p * material.thickness / cos_t_geom)
    enter = 1.0 - R
    T = enter * survive
    return InterfaceCoefficients(R, T, enter - T)


def fresnel_parameter(h: float, d1: float, d2: float, f: float) -> float:
    """Knife-edge Fresnel-Kirchhoff parameter for clearance ``h`` (positive = obstructed)."""
    lam = C / f
    return h * math.sqrt(2.0 * (d1 + d2) / (lam * d1 * d2))


def knife_edge_loss(v: float) -> float:
    """Single knife-edge diffraction loss J(v) in dB."""
    if v <= -0.78:
        return 0.0
    return 6.9 + 20.0 * math.log10(math.sqrt((v - 0.1) ** 2 + 1.0) + v - 0.1)
