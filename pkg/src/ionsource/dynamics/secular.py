"""Secular frequencies from simulated small-amplitude motion."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from ..fields.bem import FieldBasis
from .integrate import FieldSource, QuadraticSource, Region, Tolerances, integrate
from .program import VoltageProgram, group_channels
from .species import CA40, IonSpecies, IonState


class InstabilityError(RuntimeError):
    """The ion is not confined by the given configuration."""


def local_quadratic(basis: FieldBasis, channels, center, h: float = 2e-6):
    """Per-channel gradient and Hessian of the unit potentials at ``center``.

    Returns (phi0 (nch,), g (nch, 3), H (nch, 3, 3)) from the analytic field
    evaluated at +-h along each axis.
    """
    c = np.asarray(center, dtype=float)
    W = basis.weights([{n: 1.0 for n in ch} for ch in channels])
    pts = [c]
    for d in np.eye(3):
        pts += [c + h * d, c - h * d]
    phi, E = basis.evaluate(np.array(pts), W)
    H = np.zeros((len(channels), 3, 3))
    for i in range(3):
        H[:, :, i] = -(E[1 + 2 * i] - E[2 + 2 * i]) / (2 * h)
    H = 0.5 * (H + np.transpose(H, (0, 2, 1)))
    return phi[0], -E[0], H


def effective_potential(basis: FieldBasis, program: VoltageProgram, species: IonSpecies, points):
    """Static potential plus the rf pseudo-potential (V) at points."""
    names = basis.names
    static = program.static_voltages()
    amps = program.rf_amplitudes()
    om = program.rf_omega()
    W = basis.weights([{n: static.get(n, 0.0) for n in names}, {n: amps.get(n, 0.0) for n in names}])
    phi, E = basis.evaluate(np.atleast_2d(points), W)
    out = phi[:, 0]
    if om:
        out = out + species.q_over_m * np.sum(E[:, 1] ** 2, axis=-1) / (4 * om**2)
    return out


def potential_minimum(basis: FieldBasis, program: VoltageProgram, species: IonSpecies = CA40,
                      guess=(0.0, 0.0, 0.0), scale: float = 50e-6) -> np.ndarray:
    f = lambda u: float(effective_potential(basis, program, species, np.asarray(guess) + scale * u)[0])
    res = minimize(f, np.zeros(3), method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-14, "maxiter": 2000})
    return np.asarray(guess) + scale * res.x


def _peak(t, x, fmax):
    """Angular frequency of the strongest spectral line below fmax (Hz)."""
    x = x - x.mean()
    w = np.hanning(len(x))
    dt = t[1] - t[0]
    nfft = 8 * len(x)
    spec = np.abs(np.fft.rfft(x * w, nfft))
    f = np.fft.rfftfreq(nfft, dt)
    band = (f > 0) & (f < fmax)
    k = np.flatnonzero(band)[np.argmax(spec[band])]
    f0 = f[k]
    df = 1.0 / (len(x) * dt)

    def neg(fr):
        return -abs(np.sum(x * w * np.exp(-2j * np.pi * fr * t)))

    r = minimize_scalar(neg, bounds=(f0 - df, f0 + df), method="bounded", options={"xatol": 1e-9 * f0})
    return 2 * math.pi * r.x


def secular_frequencies(source, program: VoltageProgram, species: IonSpecies = CA40,
                        center=None, amplitude: float = 0.2e-6, periods: float = 40.0,
                        tolerances: Tolerances = Tolerances()) -> np.ndarray:
    """(wx, wy, wz) in rad/s from a spectral fit of simulated motion.

    ``source`` is a FieldSource (motion about the origin) or a FieldBasis,
    in which case the motion is simulated in the local quadratic expansion
    about the pseudo-potential minimum.
    """
    if isinstance(source, FieldBasis):
        names = source.names
        channels = group_channels(program, names)
        if center is None:
            center = potential_minimum(source, program, species)
        _, g, H = local_quadratic(source, channels, center)
        src: FieldSource = QuadraticSource(H, g, channels)
    else:
        src = source
    om = program.rf_omega()
    # rough scale for the run length: the static curvature or the rf drive
    T_rf = 2 * math.pi / om if om else None
    guess = _guess_period(src, program, species)
    t_end = periods * guess
    hmax = T_rf / 100 if T_rf else guess / 200
    ion = IonState(amplitude * np.array([1.0, 0.7, 1.3]), np.zeros(3), 0.0, species)
    region = Region(src, r_lateral=1e3 * amplitude, z_exit=1e3 * amplitude, z_entry=-1e3 * amplitude,
                    hmax=hmax)
    res = integrate(ion, region, program, t_end, tolerances, record_every=1, max_records=2_000_000)
    if res.status[0] != 5:
        raise InstabilityError(f"ion left the confinement region ({res.outcomes[0].name})")
    rec = res.record
    t = np.linspace(rec[0, 0], rec[-1, 0], len(rec))
    fmax = 0.5 * om / (2 * math.pi) if om else np.inf
    out = []
    for k in range(3):
        x = np.interp(t, rec[:, 0], rec[:, 1 + k])
        out.append(_peak(t, x, fmax))
    return np.array(out)


def _guess_period(src, program, species) -> float:
    """Longest plausible secular period from the quadratic coefficients."""
    if isinstance(src, QuadraticSource):
        st = program
        from .program import compile_program

        cp = compile_program(st, src.channels)
        Hs = np.einsum("c,cij->ij", cp.dc, src.H)
        Hr = np.einsum("c,cij->ij", cp.amp, src.H)
        om = program.rf_omega()
        K = species.q_over_m * Hs
        if om:
            K = K + species.q_over_m**2 * Hr @ Hr / (2 * om**2)
        ev = np.linalg.eigvalsh(K)
        ev = ev[ev > 0]
        if len(ev) == 0:
            raise InstabilityError("no confining curvature")
        return 2 * math.pi / math.sqrt(ev.min())
    return 10e-6
