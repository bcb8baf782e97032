"""Trajectory integration through superposed, time-dependent fields."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..fields.maps import AxisSeries, FieldMap, _dummies, _factorials
from ..geometry import Annulus, Box, GeometrySet
from . import _core
from .program import CompiledProgram, VoltageProgram, compile_program
from .species import IonSpecies, IonState


class StiffnessError(RuntimeError):
    """Step size underflow or step budget exhausted."""


class Outcome(enum.IntEnum):
    ACTIVE = _core.ACTIVE
    EXITED = _core.EXITED
    REFLECTED = _core.REFLECTED
    STRUCK = _core.STRUCK
    LATERAL = _core.LATERAL
    TIMEOUT = _core.TIMEOUT
    STIFF = _core.STIFF


@dataclass(frozen=True)
class Tolerances:
    rtol: float = 1e-9
    atol_position: float = 1e-12  # m
    atol_velocity: float = 1e-9  # m/s
    h_initial: float = 1e-11
    h_min: float = 1e-19
    max_steps: int = 5_000_000


# ---------------------------------------------------------------------------
# field sources


class FieldSource:
    kind = 0
    channels: list = []

    def arrays(self) -> tuple:
        d = _dummies()
        return (d["qH"], d["qg"], d["G"], d["gmeta"], d["G"], d["gmeta"], d["D"], d["smeta"],
                d["rp"], d["rp"], d["rq"])

    def factorials(self) -> np.ndarray:
        return np.ones(1)


class NullSource(FieldSource):
    kind = 0

    def __init__(self):
        self.channels = []


class QuadraticSource(FieldSource):
    """phi_c(r) = 0.5 r.H_c.r + g_c.r per channel."""

    kind = 1

    def __init__(self, H, g, channels):
        self.H = np.ascontiguousarray(H, dtype=float)
        self.g = np.ascontiguousarray(g, dtype=float)
        self.channels = [list(c) if not isinstance(c, str) else [c] for c in channels]

    def arrays(self):
        a = list(super().arrays())
        a[0], a[1] = self.H, self.g
        return tuple(a)


class GridSource(FieldSource):
    kind = 2

    def __init__(self, fmap: FieldMap):
        self.map = fmap
        self.channels = fmap.channels

    def arrays(self):
        a = list(super().arrays())
        a[2], a[3] = self.map.G1, self.map.fine.meta()
        a[4], a[5] = self.map.G2, self.map.coarse.meta()
        return tuple(a)


class SeriesSource(FieldSource):
    kind = 3

    def __init__(self, series: AxisSeries):
        self.series = series
        self.channels = series.channels

    def arrays(self):
        a = list(super().arrays())
        s = self.series
        a[6], a[7] = s.D, s.smeta()
        a[8], a[9], a[10] = s.ring_p0, s.ring_p1, s.ring_q
        return tuple(a)

    def factorials(self):
        return _factorials(self.series.D.shape[2])


# ---------------------------------------------------------------------------


@dataclass
class Region:
    """A field source plus the planes and bounds that terminate tracking in it."""

    source: FieldSource
    z_exit: float = math.inf
    z_entry: float = -math.inf
    r_lateral: float = math.inf
    solids: Sequence = ()
    planes: Sequence[float] = ()
    hmax: float = math.inf

    def solid_arrays(self):
        boxes = [s for s in self.solids if isinstance(s, Box)]
        ann = [s for s in self.solids if isinstance(s, Annulus)]
        B = np.zeros((len(boxes), 15))
        for i, b in enumerate(boxes):
            B[i, :3] = b.center
            B[i, 3:12] = np.asarray(b.axes, dtype=float).ravel()
            B[i, 12:15] = b.half
        A = np.zeros((len(ann), 4))
        for i, a in enumerate(ann):
            A[i] = (a.r_in, a.r_out, a.z0, a.z1)
        return B, A


@dataclass
class TrajectoryResult:
    status: np.ndarray  # (n,) Outcome codes
    final: np.ndarray  # (n, 7) t, x, y, z, vx, vy, vz at termination
    turnaround: np.ndarray  # (n, 7), NaN if none
    crossings: np.ndarray  # (n, nplanes, 7), NaN if not crossed
    n_steps: int
    record: Optional[np.ndarray] = None  # (nrec, 1 + 6n)

    @property
    def outcomes(self):
        return [Outcome(int(s)) for s in self.status]


def _as_arrays(ions):
    if isinstance(ions, IonState):
        ions = [ions]
    y0 = np.concatenate([np.concatenate([s.position, s.velocity]) for s in ions])
    qm = np.array([s.species.q_over_m for s in ions])
    qq = np.array([s.species.charge for s in ions], dtype=float)
    t0 = ions[0].time
    if any(s.time != t0 for s in ions):
        raise ValueError("ions of one shot must share the start time")
    return y0, qm, qq, t0


def integrate(ions, region: Region, program, t_end: float, tolerances: Tolerances = Tolerances(),
              coulomb: bool = True, jitter_draw: float = 0.0, record_every: int = 0,
              max_records: int = 200_000, raise_on_stiff: bool = True) -> TrajectoryResult:
    """Integrate one shot (one or more ions) through ``region`` until every ion
    exits, reflects, strikes a conductor, leaves laterally or ``t_end``.

    ``program`` is a :class:`VoltageProgram` (compiled onto the source
    channels) or an already compiled program.
    """
    y0, qm, qq, t0 = _as_arrays(ions)
    src = region.source
    if isinstance(program, VoltageProgram):
        prog = compile_program(program, src.channels, jitter_draw=jitter_draw)
    elif program is None:
        prog = compile_program(VoltageProgram(), src.channels)
    else:
        prog = program
    if len(prog.channels) != len(src.channels) and src.kind != 0:
        raise ValueError("program channels do not match the field source")
    if src.kind == 0 and len(prog.dc) == 0:
        prog = compile_program(VoltageProgram(), [["_"]])
    B, A = region.solid_arrays()
    planes = np.asarray(region.planes, dtype=float)
    rec = np.zeros((max_records if record_every > 0 else 1, 1 + len(y0)))
    status, final, turn, cross, nsteps, nrec = _core.integrate_shot(
        y0, float(t0), float(t_end), qm, qq, bool(coulomb and len(qm) > 1), src.kind, prog.as_tuple(),
        src.arrays(), src.factorials(), float(region.z_exit), float(region.z_entry),
        float(region.r_lateral), B, A, planes, prog.breakpoints, float(region.hmax),
        float(tolerances.h_initial), float(tolerances.rtol), float(tolerances.atol_position),
        float(tolerances.atol_velocity), float(tolerances.h_min), int(tolerances.max_steps),
        int(record_every), rec)
    if raise_on_stiff and np.any(status == _core.STIFF):
        raise StiffnessError(f"step size underflow or step budget exhausted at t={np.nanmax(final[:, 0]):.6e} s")
    return TrajectoryResult(status, final, turn, cross, int(nsteps),
                            rec[:nrec].copy() if record_every > 0 else None)


def ballistic(final: np.ndarray, z_plane: float) -> np.ndarray:
    """Propagate (t, x, y, z, vx, vy, vz) rows in field-free space to z_plane."""
    f = np.atleast_2d(final)
    dt = (z_plane - f[:, 3]) / f[:, 6]
    out = f.copy()
    out[:, 0] += dt
    out[:, 1] += f[:, 4] * dt
    out[:, 2] += f[:, 5] * dt
    out[:, 3] = z_plane
    return out


def write_trajectory_csv(path, result: TrajectoryResult, ion_offset: int = 0) -> None:
    if result.record is None:
        raise ValueError("trajectory was not recorded")
    rec = result.record
    n = (rec.shape[1] - 1) // 6
    with open(path, "w") as fh:
        fh.write("t_s,ion_id,x_m,y_m,z_m,vx,vy,vz\n")
        for row in rec:
            for i in range(n):
                s = row[1 + 6 * i: 7 + 6 * i]
                fh.write(f"{row[0]:.15e},{i + ion_offset}," + ",".join(f"{v:.15e}" for v in s) + "\n")
