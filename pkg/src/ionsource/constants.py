"""Physical constants (SI, CODATA 2018 exact/recommended values)."""

import math

E_CHARGE = 1.602176634e-19  # C
AMU = 1.66053906660e-27  # kg
EPS0 = 8.8541878128e-12  # F/m
K_B = 1.380649e-23  # J/K

COULOMB_K = 1.0 / (4.0 * math.pi * EPS0)
