"""Equilibrium positions of a linear ion chain in a harmonic axial well."""

from __future__ import annotations

import numpy as np

from ..constants import COULOMB_K
from .species import CA40, IonSpecies


def length_scale(omega_ax: float, species: IonSpecies = CA40) -> float:
    """l = (q^2 / (4 pi eps0 m w^2))^(1/3) in metres."""
    q = species.charge_c
    return float((COULOMB_K * q * q / (species.mass_kg * omega_ax**2)) ** (1.0 / 3.0))


def _grad_hess(u):
    n = len(u)
    d = u[:, None] - u[None, :]
    np.fill_diagonal(d, 1.0)
    inv2 = np.sign(d) / d**2
    inv3 = 1.0 / np.abs(d) ** 3
    np.fill_diagonal(inv2, 0.0)
    np.fill_diagonal(inv3, 0.0)
    g = u - inv2.sum(axis=1)
    H = -2.0 * inv3
    H[np.diag_indices(n)] = 1.0 + 2.0 * inv3.sum(axis=1)
    return g, H


def chain_equilibrium(n: int, omega_ax: float, species: IonSpecies = CA40, tol: float = 1e-12,
                      max_iter: int = 100) -> np.ndarray:
    """Axial positions (m, ascending) of ``n`` identical ions.

    Newton iteration on the dimensionless energy
    sum u_i^2 / 2 + sum_{i<j} 1 / |u_i - u_j| until the gradient norm is
    below ``tol``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not omega_ax > 0:
        raise ValueError("omega_ax must be > 0")
    u = np.linspace(-1.0, 1.0, n) * 0.9 * n ** 0.56 if n > 1 else np.zeros(1)
    for _ in range(max_iter):
        g, H = _grad_hess(u)
        if np.linalg.norm(g) < tol:
            break
        step = np.linalg.solve(H, g)
        # keep the ordering intact
        lam = 1.0
        while lam > 1e-6:
            trial = u - lam * step
            if np.all(np.diff(trial) > 0):
                break
            lam *= 0.5
        u = trial
    else:
        g, _ = _grad_hess(u)
        if np.linalg.norm(g) >= tol:
            raise RuntimeError("chain equilibrium did not converge")
    u = np.sort(u)
    return u * length_scale(omega_ax, species)


def crystal_hessian(positions, omegas, species: IonSpecies = CA40) -> np.ndarray:
    """Hessian (J/m^2, 3n x 3n) of the harmonic trap plus Coulomb energy.

    ``positions`` (n, 3) are ion coordinates relative to the trap centre and
    ``omegas`` the single-ion secular angular frequencies along x, y, z.
    """
    r = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(r)
    m = species.mass_kg
    kq = COULOMB_K * species.charge_c**2
    H = np.zeros((3 * n, 3 * n))
    trap = m * np.asarray(omegas, dtype=float) ** 2
    for i in range(n):
        H[3 * i:3 * i + 3, 3 * i:3 * i + 3] += np.diag(trap)
        for j in range(i + 1, n):
            d = r[i] - r[j]
            dist = np.linalg.norm(d)
            e = d / dist
            B = kq / dist**3 * (3.0 * np.outer(e, e) - np.eye(3))
            H[3 * i:3 * i + 3, 3 * i:3 * i + 3] += B
            H[3 * j:3 * j + 3, 3 * j:3 * j + 3] += B
            H[3 * i:3 * i + 3, 3 * j:3 * j + 3] -= B
            H[3 * j:3 * j + 3, 3 * i:3 * i + 3] -= B
    return H
