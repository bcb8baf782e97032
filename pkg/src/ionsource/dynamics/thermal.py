"""Thermal initial conditions of trapped ions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..constants import K_B
from .chain import chain_equilibrium, crystal_hessian
from .species import CA40, Ensemble, IonSpecies

# stream ids for SeedSequence spawn keys
STREAM_THERMAL = 1
STREAM_JITTER = 2
STREAM_DETECT = 3


def shot_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based generator: depends only on (seed, stream, index)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index))))


@dataclass
class ThermalSource:
    """Boltzmann source in a harmonic well.

    ``omegas`` are the secular angular frequencies (rad/s) along x, y, z.
    ``rf_field`` maps (n, 3) positions to the rf field amplitude (V/m) so that
    the rf field is ``rf_field(r) * cos(rf_omega t + phase)``; it is used for
    the first-order micromotion velocity at the sampling phase ``rf_phase``.
    """

    temperature: float  # K
    omegas: Sequence[float]
    offset: Sequence[float] = (0.0, 0.0, 0.0)
    rf_phase: float = 0.0
    rf_omega: float = 0.0
    rf_field: Optional[Callable] = field(default=None, repr=False)
    orbit: Sequence[float] = (0.0, 0.0, 0.0)  # secular amplitude per axis (m)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        self.omegas = np.asarray(self.omegas, dtype=float).reshape(3)
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        self.orbit = np.asarray(self.orbit, dtype=float).reshape(3)
        if np.any(self.orbit != 0) and np.any(self.omegas[self.orbit != 0] <= 0):
            raise ValueError("a secular orbit needs a confining axis")
        if self.temperature > 0 and np.any(self.omegas <= 0):
            raise ValueError("a non-confining axis (omega <= 0) with T > 0 has unbounded position spread")

    def sigmas(self, species: IonSpecies = CA40):
        """(sigma_x per axis (m), sigma_v (m/s))."""
        sv = np.sqrt(K_B * self.temperature / species.mass_kg)
        with np.errstate(divide="ignore"):
            sx = np.where(self.omegas > 0, sv / np.where(self.omegas > 0, self.omegas, 1.0), 0.0)
        return sx, float(sv)


def micromotion_velocity(rf_field_amp: np.ndarray, species: IonSpecies, rf_omega: float,
                         phase: float) -> np.ndarray:
    """v = q E_rf sin(phase) / (m Omega) for a field E_rf cos(Omega t + phase)."""
    return species.q_over_m * np.asarray(rf_field_amp) * np.sin(phase) / rf_omega


def sample_thermal(src: ThermalSource, species, n: int, seed: int = 0,
                   chain_omega: Optional[float] = None, start_index: int = 0) -> Ensemble:
    """Draw ``n`` shots.

    ``species`` is one species or a list (one per ion of a crystal). Several
    ions are placed at their chain equilibrium along z (using ``chain_omega``
    or the axial secular frequency); their displacements follow the Boltzmann
    distribution of the crystal's quadratic energy (covariance kT H^-1, with
    H the trap plus Coulomb Hessian), velocities are independent per ion. A non-zero ``src.orbit`` adds a secular oscillation of that
    amplitude with a uniformly random phase per shot (an ion released off the
    minimum some unsynchronized time before the trigger). Shot i only depends
    on (seed, start_index + i).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    species_list = [species] if isinstance(species, IonSpecies) else list(species)
    nions = len(species_list)
    if nions > 1:
        if len({s.mass for s in species_list}) > 1 or len({s.charge for s in species_list}) > 1:
            raise ValueError("mixed crystals are not supported")
        eq = chain_equilibrium(nions, chain_omega or src.omegas[2], species_list[0])
    else:
        eq = np.zeros(1)
    states = np.zeros((n, nions, 6))
    chol = None
    if nions > 1 and src.temperature > 0:
        pos = np.zeros((nions, 3))
        pos[:, 2] = eq
        H = crystal_hessian(pos, src.omegas, species_list[0])
        chol = np.linalg.cholesky(K_B * src.temperature * np.linalg.inv(H))
    for i in range(n):
        rng = shot_rng(seed, STREAM_THERMAL, start_index + i)
        z = rng.standard_normal((nions, 6))
        for j, sp in enumerate(species_list):
            sx, sv = src.sigmas(sp)
            states[i, j, :3] = src.offset + np.array([0.0, 0.0, eq[j]]) + sx * z[j, :3]
            states[i, j, 3:] = sv * z[j, 3:]
        if chol is not None:
            states[i, :, :3] = src.offset + np.column_stack([np.zeros((nions, 2)), eq]) \
                + (chol @ z[:, :3].ravel()).reshape(nions, 3)
        if np.any(src.orbit != 0):
            th = rng.uniform(0.0, 2 * np.pi, 3)
            states[i, :, :3] += src.orbit * np.cos(th)
            states[i, :, 3:] -= src.orbit * src.omegas * np.sin(th)
    if src.rf_field is not None and src.rf_omega > 0 and np.sin(src.rf_phase) != 0.0:
        flat = states[:, :, :3].reshape(-1, 3)
        E = np.asarray(src.rf_field(flat), dtype=float).reshape(n, nions, 3)
        for j, sp in enumerate(species_list):
            states[:, j, 3:] += micromotion_velocity(E[:, j], sp, src.rf_omega, src.rf_phase)
    meta = {"temperature_k": src.temperature, "omegas": src.omegas.tolist(),
            "offset_m": src.offset.tolist(), "orbit_m": src.orbit.tolist(), "rf_phase": src.rf_phase}
    return Ensemble(states, species_list, seed, meta)
