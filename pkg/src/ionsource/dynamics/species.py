"""Ion species, single-ion states and ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..constants import AMU, E_CHARGE

ELECTRON_MASS_U = 5.48579909065e-4


@dataclass(frozen=True)
class IonSpecies:
    name: str
    mass: float  # u
    charge: float = 1.0  # e

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be > 0")
        if self.charge == 0:
            raise ValueError("charge must be non-zero")

    @property
    def mass_kg(self) -> float:
        return self.mass * AMU

    @property
    def charge_c(self) -> float:
        return self.charge * E_CHARGE

    @property
    def q_over_m(self) -> float:
        return self.charge_c / self.mass_kg

    def speed_for_energy(self, energy_ev: float) -> float:
        """Speed (m/s) of this ion after falling through ``energy_ev`` per charge."""
        return float(np.sqrt(2.0 * self.charge_c * energy_ev / self.mass_kg))


# singly ionized atomic masses
CA40 = IonSpecies("40Ca+", 39.962590863 - ELECTRON_MASS_U, 1.0)
N14 = IonSpecies("14N+", 14.003074004 - ELECTRON_MASS_U, 1.0)
N2 = IonSpecies("14N2+", 2 * 14.003074004 - ELECTRON_MASS_U, 1.0)

SPECIES = {"Ca40": CA40, "40Ca+": CA40, "N14": N14, "14N+": N14, "N2": N2, "14N2+": N2}


def species_by_name(name: str) -> IonSpecies:
    try:
        return SPECIES[name]
    except KeyError:
        raise KeyError(f"unknown species {name!r}; known: {sorted(SPECIES)}") from None


@dataclass
class IonState:
    position: np.ndarray
    velocity: np.ndarray
    time: float = 0.0
    species: IonSpecies = CA40

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))
                and np.isfinite(self.time)):
            raise ValueError("ion state must be finite")

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass
class Ensemble:
    """Initial conditions for ``n_shots`` shots of ``n_ions`` ions each.

    ``states`` has shape (n_shots, n_ions, 6) holding x, y, z, vx, vy, vz.
    """

    states: np.ndarray
    species: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_shots(self) -> int:
        return self.states.shape[0]

    @property
    def n_ions(self) -> int:
        return self.states.shape[1]

    def shot(self, i: int) -> list:
        return [IonState(s[:3], s[3:], 0.0, sp) for s, sp in zip(self.states[i], self.species)]
