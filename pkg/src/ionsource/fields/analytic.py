"""Closed-form reference fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..constants import AMU, E_CHARGE


@dataclass(frozen=True)
class QuadrupoleParams:
    """Ideal linear Paul trap: rf quadrupole plus a static axial harmonic term.

    ``rf_frequency`` is the angular drive frequency (rad/s);
    ``dc_axial_curvature`` is d^2 phi/dz^2 of the static potential (V/m^2).
    """

    rf_amplitude: float = 200.0
    rf_frequency: float = 2 * math.pi * 12.155e6
    r0: float = 1.0e-3
    dc_axial_curvature: float = 0.0
    rf_phase: float = 0.0

    def __post_init__(self):
        if not self.rf_frequency > 0:
            raise ValueError("rf_frequency must be > 0")
        if not self.r0 > 0:
            raise ValueError("r0 must be > 0")

    def mathieu_q(self, mass_u: float, charge_e: float = 1.0) -> float:
        m = mass_u * AMU
        return 2 * abs(charge_e) * E_CHARGE * self.rf_amplitude / (m * self.r0**2 * self.rf_frequency**2)

    def mathieu_a_axial(self, mass_u: float, charge_e: float = 1.0) -> float:
        m = mass_u * AMU
        return 4 * charge_e * E_CHARGE * self.dc_axial_curvature / (2 * m * self.rf_frequency**2)

    def secular_first_order(self, mass_u: float, charge_e: float = 1.0) -> float:
        """Lowest-order radial secular angular frequency q Omega / (2 sqrt 2)."""
        return self.mathieu_q(mass_u, charge_e) * self.rf_frequency / (2 * math.sqrt(2))

    def mathieu_a_radial(self, mass_u: float, charge_e: float = 1.0) -> float:
        m = mass_u * AMU
        return -2 * charge_e * E_CHARGE * self.dc_axial_curvature / (m * self.rf_frequency**2)

    def secular_floquet(self, mass_u: float, charge_e: float = 1.0) -> float:
        """Radial secular angular frequency beta Omega / 2 from the Floquet exponent."""
        beta = mathieu_beta(self.mathieu_a_radial(mass_u, charge_e), self.mathieu_q(mass_u, charge_e))
        return beta * self.rf_frequency / 2

    def axial_frequency(self, mass_u: float, charge_e: float = 1.0) -> float:
        m = mass_u * AMU
        return math.sqrt(charge_e * E_CHARGE * self.dc_axial_curvature / m)

    def quadratic_channels(self):
        """(H, g) per channel: channel 0 is the rf quadrupole per volt, 1 the dc term.

        phi_c(r) = 0.5 r.H_c.r + g_c.r, so E_c = -(H_c r + g_c).
        """
        H = np.zeros((2, 3, 3))
        H[0] = np.diag([1.0, -1.0, 0.0]) / self.r0**2
        H[1] = np.diag([-0.5, -0.5, 1.0])
        return H, np.zeros((2, 3))


def ideal_quadrupole_potential(point, t: float, qp: QuadrupoleParams) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rf = qp.rf_amplitude * math.cos(qp.rf_frequency * t + qp.rf_phase)
    return rf * (x * x - y * y) / (2 * qp.r0**2) + 0.5 * qp.dc_axial_curvature * (z * z - 0.5 * (x * x + y * y))


def ideal_quadrupole_field(point, t: float, qp: QuadrupoleParams) -> np.ndarray:
    """-grad of ``ideal_quadrupole_potential`` (V/m)."""
    p = np.asarray(point, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rf = qp.rf_amplitude * math.cos(qp.rf_frequency * t + qp.rf_phase)
    k = qp.dc_axial_curvature
    ex = -rf * x / qp.r0**2 + 0.5 * k * x
    ey = rf * y / qp.r0**2 + 0.5 * k * y
    ez = -k * z
    return np.stack([ex, ey, ez], axis=-1)


def mathieu_beta(a: float, q: float, steps: int = 4000) -> float:
    """Characteristic exponent beta of x'' + (a - 2 q cos 2 tau) x = 0.

    The monodromy matrix over one period pi is built with classical RK4 on
    ``steps`` steps; cos(pi beta) equals half its trace in the first
    stability region.
    """
    h = math.pi / steps
    Y = np.eye(2)

    def f(tau, Y):
        k = a - 2 * q * math.cos(2 * tau)
        return np.array([Y[1], -k * Y[0]])

    tau = 0.0
    for _ in range(steps):
        k1 = f(tau, Y)
        k2 = f(tau + h / 2, Y + h / 2 * k1)
        k3 = f(tau + h / 2, Y + h / 2 * k2)
        k4 = f(tau + h, Y + h * k3)
        Y = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += h
    half = 0.5 * np.trace(Y)
    if abs(half) >= 1:
        raise ValueError(f"(a={a}, q={q}) is outside the first stability region")
    return math.acos(half) / math.pi


def harmonic_channels(omegas, mass_u: float, charge_e: float = 1.0):
    """Static anisotropic harmonic well as one quadratic channel at 1 V."""
    m = mass_u * AMU
    H = np.zeros((1, 3, 3))
    H[0] = np.diag(np.asarray(omegas, dtype=float) ** 2 * m / (charge_e * E_CHARGE))
    return H, np.zeros((1, 3))


def uniform_channels(field):
    """Uniform field (V/m) as one channel at 1 V."""
    H = np.zeros((1, 3, 3))
    g = -np.asarray(field, dtype=float).reshape(1, 3)
    return H, g
