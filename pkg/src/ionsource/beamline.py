"""End-to-end beamline: trapped-ion extraction, drift, einzel lens, optional
post-acceleration tube, apertures and a target plane.

Each element owns a field region. Between regions ions fly ballistically;
on leaving a region the state is mapped to its field-free asymptote
(guiding-centre velocity plus the remaining static potential energy).
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .diagnostics import SpotDiagram, r68
from .dynamics import _core
from .dynamics.integrate import (GridSource, NullSource, Region, SeriesSource, StiffnessError,
                                 Tolerances, integrate)
from .dynamics.program import (CompiledProgram, ElectrodeProgram, RfTerm, SwitchEvent,
                               VoltageProgram, compile_program, group_channels)
from .dynamics.secular import secular_frequencies, potential_minimum
from .dynamics.species import IonSpecies, IonState, species_by_name
from .dynamics.thermal import STREAM_JITTER, ThermalSource, sample_thermal, shot_rng
from .fields.bem import FieldBasis, solve_basis
from .fields.maps import AxisSeries, FieldMap, GridSpec, build_field_map
from .geometry import (Aperture, LensParams, TrapParams, TubeParams, build_lens, build_trap,
                       build_tube, panelize)

log = logging.getLogger(__name__)

RF_OMEGA = 2 * math.pi * 12.155e6
# trigger phase giving the smallest spot and speed spread for the default trap
OPTIMAL_PHASE = 0.75 * math.pi


class ShotError(RuntimeError):
    """A shot failed; carries the shot index."""

    def __init__(self, shot: int, cause: Exception):
        super().__init__(f"shot {shot}: {cause}")
        self.shot = shot
        self.cause = cause


class Outcome(str, enum.Enum):
    HIT = "hit"
    REFLECTED = "reflected"
    STRUCK = "struck_electrode"
    LOST = "lost"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MeshSettings:
    target_panel_size: float
    gap_refinement: float = 2.0
    grading: float = 0.0


TRAP_MESH = MeshSettings(120e-6, 2.0, 0.2)
LENS_MESH = MeshSettings(20e-6, 4.0, 0.02)
TUBE_MESH = MeshSettings(100e-6, 2.0, 0.05)

TRAP_FINE = GridSpec((-0.3e-3, -0.3e-3, -1.5e-3), (0.3e-3, 0.3e-3, 10e-3), (20e-6, 20e-6, 50e-6))
TRAP_COARSE = GridSpec((-2e-3, -2e-3, -3e-3), (2e-3, 2e-3, 30e-3), (100e-6, 100e-6, 250e-6))


@dataclass(frozen=True)
class TrapSource:
    """Trap geometry and its drive.

    The rf is applied to rfA and rfC as ``amplitude cos(omega t + phi0)``;
    ``dc_segments`` on every blade hold ``dc_voltage``; at the trigger the
    ``extraction_segments`` ramp linearly to ``extraction_voltage``.
    """

    params: TrapParams = TrapParams()
    mesh: MeshSettings = TRAP_MESH
    rf_amplitude: float = 200.0
    rf_omega: float = RF_OMEGA
    dc_segments: tuple = (2, 8)
    dc_voltage: float = 35.0
    extraction_segments: tuple = (4, 5)
    extraction_voltage: float = 500.0
    rise_time: float = 5e-9
    trigger_delay: float = 2e-9
    jitter_sigma: float = 0.0
    compensation: tuple = ()  # ((electrode, volts), ...)
    overrides: tuple = ()  # ((electrode, ElectrodeProgram), ...) replacing the generated law
    extract: bool = True
    handoff_z: float = 28e-3
    fine: GridSpec = TRAP_FINE
    coarse: GridSpec = TRAP_COARSE
    max_time: float = 20e-6


@dataclass(frozen=True)
class SourceSettings:
    species: tuple = ("Ca40",)
    temperature: float = 2e-3  # K
    offset: tuple = (0.0, 0.0, 0.0)  # m, static displacement from the potential minimum
    orbit: tuple = (0.0, 0.0, 0.0)  # m, secular amplitude with random phase
    rf_trigger_phase: float = OPTIMAL_PHASE  # rad, rf phase at the nominal trigger

    def species_list(self):
        return [species_by_name(s) if isinstance(s, str) else s for s in self.species]


@dataclass(frozen=True)
class SyntheticBeam:
    """Ballistic point source at the trap centre replacing the trap stage.

    Transverse velocities are Gaussian, sized so that the spot at
    ``reference_z`` has the given r68; speeds are Gaussian about ``speed``.
    """

    speed: float
    speed_sigma: float
    r68_at_reference: float
    reference_z: float = 0.247
    species: str = "Ca40"


@dataclass(frozen=True)
class SwitchSchedule:
    """Centre-electrode switch from v1 to v2, ``delay`` after the reference ion enters L1."""

    v1: float
    v2: float
    delay: float
    rise_time: float = 5e-9

    def __post_init__(self):
        if self.rise_time < 0:
            raise ValueError("rise_time must be >= 0")


@dataclass(frozen=True)
class LensElement:
    params: LensParams = LensParams()
    voltage: float = 65.0
    schedule: Optional[SwitchSchedule] = None
    outer_voltage: float = 0.0
    mesh: MeshSettings = LENS_MESH
    region_margin: float = 30e-3
    series_margin: float = 5e-3


@dataclass(frozen=True)
class TubeElement:
    """Post-acceleration tube at ``voltage``, switched to 0 V ``switch_delay``
    after the reference ion has crossed the tube centre."""

    params: TubeParams = TubeParams()
    voltage: float = -10e3
    switch_delay: Optional[float] = 0.0
    rise_time: float = 5e-9
    mesh: MeshSettings = TUBE_MESH
    region_margin: float = 20e-3


@dataclass(frozen=True)
class Beamline:
    trap: TrapSource = TrapSource()
    source: SourceSettings = SourceSettings()
    deflection: tuple = (0.0, 0.0)  # (U1 across A/C, U2 across B/D), V
    lens: Optional[LensElement] = None
    tube: Optional[TubeElement] = None
    apertures: tuple = ()
    target_z: float = 0.247
    synthetic: Optional[SyntheticBeam] = None
    tolerances: Tolerances = Tolerances()

    def __post_init__(self):
        zs = [0.0]
        if self.lens is not None:
            zs.append(self.lens.params.z_entry)
        if self.tube is not None:
            zs.append(self.tube.params.axial_position)
        zs.append(self.target_z)
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise ValueError("beamline elements must be in strictly increasing z order")

    def replace(self, **kw) -> "Beamline":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# voltage programs


def trap_program(trap: TrapSource, deflection=(0.0, 0.0), phase: float = 0.0) -> VoltageProgram:
    """Electrode programs of the trap for an rf phase ``phase`` at the nominal trigger."""
    p = trap.params
    blades = "ABCD"
    phi0 = phase - trap.rf_omega * trap.trigger_delay
    e = {}
    for b in "AC":
        e[f"rf{b}"] = ElectrodeProgram(rf=RfTerm(trap.rf_amplitude, trap.rf_omega, phi0))
    for k in trap.dc_segments:
        for b in blades:
            e[f"seg{k}{b}"] = ElectrodeProgram(dc=trap.dc_voltage)
    for k in trap.extraction_segments:
        for b in blades:
            prev = e.get(f"seg{k}{b}", ElectrodeProgram())
            ev = (SwitchEvent(trap.trigger_delay, trap.extraction_voltage, trap.rise_time),) if trap.extract else ()
            e[f"seg{k}{b}"] = ElectrodeProgram(dc=prev.dc, events=ev)
    if p.deflection_electrode:
        u1, u2 = deflection
        for b, v in (("A", 0.5 * u1), ("C", -0.5 * u1), ("B", 0.5 * u2), ("D", -0.5 * u2)):
            if v != 0.0:
                e[f"defl{b}"] = ElectrodeProgram(dc=v)
    for name, v in trap.compensation:
        prev = e.get(name, ElectrodeProgram())
        e[name] = dataclasses.replace(prev, dc=prev.dc + float(v))
    for name, prog in trap.overrides:
        if prog.rf is not None:
            # override phases are relative to the generated rf drive
            prog = dataclasses.replace(prog, rf=dataclasses.replace(prog.rf, phase=prog.rf.phase + phi0))
        e[name] = prog
    return VoltageProgram(e, jitter_sigma=trap.jitter_sigma)


def apply_switch_schedule(lens: LensElement, schedule: Optional[SwitchSchedule], t_entry: float = 0.0):
    """Program of the lens electrodes; the centre electrode switches at t_entry + delay."""
    outer = ElectrodeProgram(dc=lens.outer_voltage)
    if schedule is None:
        centre = ElectrodeProgram(dc=lens.voltage)
    elif schedule.v1 == schedule.v2:
        centre = ElectrodeProgram(dc=schedule.v1)
    else:
        centre = ElectrodeProgram(dc=schedule.v1, events=(
            SwitchEvent(t_entry + schedule.delay, schedule.v2, schedule.rise_time, jittered=False),))
    return VoltageProgram({"L1": outer, "L2": centre, "L3": outer})


# ---------------------------------------------------------------------------
# prepared field data (expensive, cached per process)


@functools.lru_cache(maxsize=8)
def _trap_basis(params: TrapParams, mesh: MeshSettings, cache_dir) -> FieldBasis:
    m = panelize(build_trap(params), mesh.target_panel_size, mesh.gap_refinement, mesh.grading)
    return solve_basis(m, cache_dir=cache_dir)


@functools.lru_cache(maxsize=8)
def _trap_map(params, mesh, channels: tuple, fine, coarse, cache_dir) -> FieldMap:
    basis = _trap_basis(params, mesh, cache_dir)
    return build_field_map(basis, [list(c) for c in channels], fine, coarse, cache_dir=cache_dir)


@functools.lru_cache(maxsize=8)
def _axisym_basis(geom_kind: str, params, mesh: MeshSettings, cache_dir) -> FieldBasis:
    g = build_lens(params) if geom_kind == "lens" else build_tube(params)
    m = panelize(g, mesh.target_panel_size, mesh.gap_refinement, mesh.grading)
    return solve_basis(m, cache_dir=cache_dir)


@functools.lru_cache(maxsize=16)
def _series(geom_kind, params, mesh, channels: tuple, z0, z1, cache_dir) -> AxisSeries:
    b = _axisym_basis(geom_kind, params, mesh, cache_dir)
    return AxisSeries(b, [list(c) for c in channels], (z0, z1), cache_dir=cache_dir, use_cache=True)


_TRAP_STATE: dict = {}


def _trap_state(params, mesh, species: IonSpecies, cache_dir, program: VoltageProgram):
    """Pseudo-potential minimum and secular frequencies (cached on the static drive)."""
    static_prog = _static_part(program)
    key = (params, mesh, species, cache_dir,
           repr(sorted((n, p.dc, p.rf) for n, p in static_prog.electrodes.items())))
    if key not in _TRAP_STATE:
        basis = _trap_basis(params, mesh, cache_dir)
        centre = potential_minimum(basis, static_prog, species)
        omegas = secular_frequencies(basis, static_prog, species, center=centre)
        _TRAP_STATE[key] = (centre, omegas)
    return _TRAP_STATE[key]


def _static_part(program: VoltageProgram) -> VoltageProgram:
    return VoltageProgram({n: ElectrodeProgram(dc=p.dc, rf=p.rf) for n, p in program.electrodes.items()})


def _trap_channels(trap: TrapSource, names, program: VoltageProgram) -> tuple:
    sep = [n for n in names if n.startswith("defl")]
    return tuple(tuple(c) for c in group_channels(program, names, separate=sep))


class Prepared:
    """Solved fields and derived trap properties for one beamline."""

    def __init__(self, beamline: Beamline, cache_dir=None):
        self.beamline = beamline
        self.cache_dir = str(cache_dir) if cache_dir is not None else None
        bl = beamline
        self._ref_cache: dict = {}
        self.species = bl.source.species_list()
        if bl.synthetic is None:
            tr = bl.trap
            self.trap_basis = _trap_basis(tr.params, tr.mesh, self.cache_dir)
            prog0 = trap_program(tr, bl.deflection, bl.source.rf_trigger_phase)
            self.trap_channels = _trap_channels(tr, self.trap_basis.names, prog0)
            self.trap_map = _trap_map(tr.params, tr.mesh, self.trap_channels, tr.fine, tr.coarse,
                                      self.cache_dir)
            self.centre, self.omegas = _trap_state(tr.params, tr.mesh, self.species[0], self.cache_dir, prog0)
            W = self.trap_basis.weights([{n: tr.rf_amplitude for n in ("rfA", "rfC")}])
            basis = self.trap_basis

            def rf_field(pts, _W=W, _b=basis):
                return _b.evaluate(np.atleast_2d(pts), _W, check=False)[1][:, 0]

            self.rf_field = rf_field
            self.trap_solids = tuple(build_trap(tr.params).solids)
        if bl.lens is not None:
            lp = bl.lens.params
            prog = apply_switch_schedule(bl.lens, bl.lens.schedule)
            names = ["L1", "L2", "L3"]
            ch = tuple(tuple(c) for c in group_channels(prog, names))
            self.lens_channels = ch
            self.lens_basis = _axisym_basis("lens", lp, bl.lens.mesh, self.cache_dir)
            z0 = lp.z_entry - bl.lens.series_margin
            z1 = lp.z_exit + bl.lens.series_margin
            self.lens_series = _series("lens", lp, bl.lens.mesh, ch, z0, z1, self.cache_dir) if ch else None
        if bl.tube is not None:
            tp = bl.tube.params
            ch = (("tube",),)
            self.tube_basis = _axisym_basis("tube", tp, bl.tube.mesh, self.cache_dir)
            self.tube_series = _series("tube", tp, bl.tube.mesh, ch, tp.axial_position - 5e-3,
                                       tp.axial_position + tp.length + 5e-3, self.cache_dir)

    # -- trap helpers -------------------------------------------------------

    def thermal_source(self, phase: float) -> ThermalSource:
        bl = self.beamline
        tr = bl.trap
        phi0 = phase - tr.rf_omega * tr.trigger_delay
        return ThermalSource(bl.source.temperature, self.omegas, self.centre + np.asarray(bl.source.offset),
                             rf_phase=phi0, rf_omega=tr.rf_omega, rf_field=self.rf_field,
                             orbit=bl.source.orbit)

    def initial_states(self, index: int, seed: int, phase: float):
        bl = self.beamline
        if bl.synthetic is not None:
            return _synthetic_states(bl.synthetic, index, seed)
        ens = sample_thermal(self.thermal_source(phase), self.species, 1, seed, start_index=index)
        return ens.shot(0)

    def reference_time(self, plane_z: float, phase: float) -> float:
        """Arrival time at ``plane_z`` of a cold ion extracted at ``phase``."""
        key = (round(plane_z, 12), round(phase, 12))
        if key not in self._ref_cache:
            bl = self.beamline
            if bl.synthetic is not None:
                t = plane_z / bl.synthetic.speed
            else:
                ion = IonState(self.centre + np.asarray(bl.source.offset), np.zeros(3), 0.0, self.species[0])
                rec = _trap_stage(self, [ion], phase, 0.0)
                st = rec[0]
                if st["outcome"] is not None:
                    raise RuntimeError("reference ion was not extracted")
                t = float(_ballistic_row(st["state"], plane_z)[0])
            self._ref_cache[key] = t
        return self._ref_cache[key]


_PREPARED: dict = {}


def prepare(beamline: Beamline, cache_dir=None) -> Prepared:
    key = (beamline, str(cache_dir))
    p = _PREPARED.get(key)
    if p is None:
        p = Prepared(beamline, cache_dir)
        if len(_PREPARED) > 16:
            _PREPARED.clear()
        _PREPARED[key] = p
    return p


# ---------------------------------------------------------------------------
# stages


def _volts(cp: CompiledProgram, t: float) -> np.ndarray:
    out = np.zeros(len(cp.dc))
    _core.channel_voltages(float(t), *cp.as_tuple(), out)
    return out


def _ballistic_row(row, z_plane):
    r = np.asarray(row, dtype=float).copy()
    dt = (z_plane - r[3]) / r[6]
    r[0] += dt
    r[1] += r[4] * dt
    r[2] += r[5] * dt
    r[3] = z_plane
    return r


def _asymptotic(row, qm, phi_static, E_rf=None, rf_omega=0.0, rf_arg=0.0, sign=1.0):
    """Map a state to its field-free asymptote.

    With sign=+1 the remaining static potential is converted to kinetic
    energy (leaving a region); sign=-1 does the inverse (entering one).
    Returns None when the ion cannot reach the region.
    """
    r = np.asarray(row, dtype=float).copy()
    v = r[4:7].copy()
    if E_rf is not None and rf_omega > 0:
        v = v - qm * np.asarray(E_rf) * math.sin(rf_arg) / rf_omega
        phi_static = phi_static + qm * float(np.dot(E_rf, E_rf)) / (4 * rf_omega**2)
    sp2 = float(v @ v) + sign * 2.0 * qm * phi_static
    if sp2 <= 0:
        return None
    r[4:7] = v * math.sqrt(sp2 / float(v @ v))
    return r


def _trap_stage(prep: Prepared, ions, phase, jitter, t_end=None, record_every=0):
    """Integrate through the trap map. Returns per-ion dicts with 'state' (asymptotic row
    at the handoff plane) or 'outcome' set for ions that did not leave."""
    bl = prep.beamline
    tr = bl.trap
    program = trap_program(tr, bl.deflection, phase)
    cp = compile_program(program, [list(c) for c in prep.trap_channels], jitter_draw=jitter)
    fmap = prep.trap_map
    region = Region(GridSource(fmap), z_exit=tr.handoff_z, z_entry=fmap.coarse.lower[2] + 1e-6,
                    r_lateral=0.98 * fmap.half_width, solids=prep.trap_solids,
                    hmax=2 * math.pi / tr.rf_omega / 100)
    t_end = t_end if t_end is not None else tr.trigger_delay + tr.max_time
    res = integrate(ions, region, cp, t_end, bl.tolerances, coulomb=True, record_every=record_every)
    out = []
    z_free = tr.params.z_front + 3e-3
    for i, ion in enumerate(ions):
        st = int(res.status[i])
        row = res.final[i]
        qm = ion.species.q_over_m
        d = {"raw": row.copy(), "status": st, "turn": res.turnaround[i].copy(), "state": None, "outcome": None}
        if st == _core.EXITED or (st == _core.LATERAL and row[3] > z_free):
            volts = _volts(cp, row[0])
            static = volts - cp.amp * np.cos(cp.omega * row[0] + cp.phase)
            Es, phis = fmap.evaluate(row[1:4], static)
            Er, _ = fmap.evaluate(row[1:4], cp.amp)
            arg = tr.rf_omega * row[0] + (phase - tr.rf_omega * tr.trigger_delay)
            a = _asymptotic(row, qm, float(phis[0]), Er[0], tr.rf_omega, arg)
            if a is None:
                d["outcome"] = Outcome.LOST
            else:
                d["state"] = a
        elif st == _core.STRUCK:
            d["outcome"] = Outcome.STRUCK
        elif st == _core.TIMEOUT:
            d["outcome"] = Outcome.LOST
        else:
            d["outcome"] = Outcome.LOST
        out.append(d)
    if record_every:
        out.append(res.record)
    return out


def _synthetic_states(sb: SyntheticBeam, index: int, seed: int):
    sp = species_by_name(sb.species)
    rng = shot_rng(seed, 1, index)
    z = rng.standard_normal(3)
    t_ref = sb.reference_z / sb.speed
    sig_t = sb.r68_at_reference / math.sqrt(-2 * math.log(0.32)) / t_ref
    v = np.array([sig_t * z[0], sig_t * z[1], sb.speed + sb.speed_sigma * z[2]])
    return [IonState(np.zeros(3), v, 0.0, sp)]


def _axisym_stage(series: Optional[AxisSeries], program: VoltageProgram, channels, row, species,
                  z_start, z_stop, r_lat, solids, tolerances, planes=()):
    """Ballistic approach to z_start, then integration to z_stop. Returns (dict)."""
    qm = species.q_over_m
    row = _ballistic_row(row, z_start)
    src = SeriesSource(series) if series is not None else NullSource()
    cp = compile_program(program, [list(c) for c in channels]) if series is not None else None
    if series is not None:
        volts = _volts(cp, row[0])
        _, phi = series.evaluate(row[1:4], volts)
        entry = _asymptotic(row, qm, float(phi[0]), sign=-1.0)
        if entry is None:
            return {"outcome": Outcome.REFLECTED, "entry": row, "state": None, "turn": row, "cross": None}
    else:
        entry = row
    region = Region(src, z_exit=z_stop, z_entry=z_start - 1e-7, r_lateral=r_lat, solids=solids,
                    planes=planes)
    ion = IonState(entry[1:4], entry[4:7], entry[0], species)
    res = integrate(ion, region, cp if cp is not None else None, entry[0] + 1e-3, tolerances, coulomb=False)
    st = int(res.status[0])
    fin = res.final[0]
    d = {"entry": entry, "raw": fin.copy(), "turn": res.turnaround[0].copy(), "cross": res.crossings[0].copy(),
         "state": None, "outcome": None}
    if st == _core.EXITED:
        if series is not None:
            volts = _volts(cp, fin[0])
            _, phi = series.evaluate(fin[1:4], volts)
            a = _asymptotic(fin, qm, float(phi[0]))
        else:
            a = fin
        d["state"] = a
        if a is None:
            d["outcome"] = Outcome.REFLECTED
    elif st == _core.REFLECTED:
        d["outcome"] = Outcome.REFLECTED
    elif st == _core.STRUCK:
        d["outcome"] = Outcome.STRUCK
    else:
        d["outcome"] = Outcome.LOST
    return d


# ---------------------------------------------------------------------------
# shots


@dataclass
class IonRecord:
    ion_id: int
    species: str
    outcome: Outcome
    states: dict  # boundary name -> (t, x, y, z, vx, vy, vz)
    turnaround: Optional[np.ndarray] = None

    @property
    def hit(self) -> Optional[np.ndarray]:
        return self.states.get("target") if self.outcome == Outcome.HIT else None

    def free_state(self) -> Optional[np.ndarray]:
        """Last asymptotic (field-free) state before the target."""
        for k in ("tube_out", "lens_out", "handoff"):
            if k in self.states:
                return self.states[k]
        return None


@dataclass
class ShotRecord:
    shot_id: int
    ions: list
    phase: float
    jitter: float

    def hits(self):
        return [i for i in self.ions if i.outcome == Outcome.HIT]


def run_shot(prep: Prepared, ions, rf_trigger_phase: float, seed: int = 0, shot_id: int = 0,
             jitter: float = 0.0, keep_trajectory: bool = False) -> ShotRecord:
    """Propagate one shot through every element of the beamline."""
    bl = prep.beamline
    try:
        return _run_shot(prep, ions, rf_trigger_phase, shot_id, jitter, keep_trajectory)
    except (StiffnessError, RuntimeError, ValueError) as exc:
        raise ShotError(shot_id, exc) from exc


def _run_shot(prep, ions, phase, shot_id, jitter, keep_trajectory):
    bl = prep.beamline
    recs = [IonRecord(i, ion.species.name, Outcome.HIT, {}) for i, ion in enumerate(ions)]
    if bl.synthetic is None:
        stage = _trap_stage(prep, ions, phase, jitter, record_every=1 if keep_trajectory else 0)
        traj = stage.pop() if keep_trajectory else None
        for rec, d in zip(recs, stage):
            rec.states["trap_raw"] = d["raw"]
            if d["outcome"] is not None:
                rec.outcome = d["outcome"]
            else:
                rec.states["handoff"] = d["state"]
    else:
        traj = None
        for rec, ion in zip(recs, ions):
            rec.states["handoff"] = np.concatenate([[ion.time], ion.position, ion.velocity])
    cur = {r.ion_id: r.states.get("handoff") for r in recs}
    aps = sorted(bl.apertures, key=lambda a: a.plane_z)

    def check_apertures(z_lo, z_hi):
        for rec in recs:
            if rec.outcome != Outcome.HIT:
                continue
            for ap in aps:
                if z_lo <= ap.plane_z < z_hi:
                    p = _ballistic_row(cur[rec.ion_id], ap.plane_z)
                    if not ap.passes(p[1:3])[0]:
                        rec.outcome = Outcome.STRUCK
                        rec.states[f"aperture_{ap.plane_z:.6g}"] = p
                        break

    z_here = bl.trap.handoff_z if bl.synthetic is None else 0.0
    if bl.lens is not None:
        L = bl.lens
        lp = L.params
        z_start = lp.z_entry - L.region_margin
        check_apertures(z_here, z_start)
        t_in = prep.reference_time(lp.z_entry, phase)
        prog = apply_switch_schedule(L, L.schedule, t_in)
        solids = build_lens(lp).solids
        for rec, ion in zip(recs, ions):
            if rec.outcome != Outcome.HIT:
                continue
            d = _axisym_stage(prep.lens_series, prog, prep.lens_channels, cur[rec.ion_id], ion.species,
                              z_start, lp.z_exit + L.region_margin, lp.outer_radius * 5, solids,
                              bl.tolerances, planes=(lp.z_entry, lp.z_exit))
            rec.states["lens_in"] = d["entry"]
            if d.get("turn") is not None and np.isfinite(d["turn"][0]):
                rec.turnaround = d["turn"]
            if d["outcome"] is not None:
                rec.outcome = d["outcome"]
            else:
                rec.states["lens_out"] = d["state"]
                cur[rec.ion_id] = d["state"]
        z_here = lp.z_exit + L.region_margin
    if bl.tube is not None:
        T = bl.tube
        tp = T.params
        z_start = tp.axial_position - T.region_margin
        check_apertures(z_here, z_start)
        t_mid = prep.reference_time(tp.axial_position, phase)
        # cold ion time to the tube centre, inside the biased tube
        vref = _tube_inside_speed(prep, T)
        t_sw = t_mid + 0.5 * tp.length / vref + (T.switch_delay or 0.0)
        ev = () if T.switch_delay is None else (SwitchEvent(t_sw, 0.0, T.rise_time, jittered=False),)
        prog = VoltageProgram({"tube": ElectrodeProgram(dc=T.voltage, events=ev)})
        solids = build_tube(tp).solids
        for rec, ion in zip(recs, ions):
            if rec.outcome != Outcome.HIT:
                continue
            d = _axisym_stage(prep.tube_series if T.voltage != 0 else None, prog, (("tube",),),
                              cur[rec.ion_id], ion.species, z_start, tp.axial_position + tp.length + T.region_margin,
                              (tp.inner_radius + tp.wall) * 5, solids, bl.tolerances)
            if d["outcome"] is not None:
                rec.outcome = d["outcome"]
            else:
                rec.states["tube_out"] = d["state"]
                cur[rec.ion_id] = d["state"]
        z_here = tp.axial_position + tp.length + T.region_margin
    check_apertures(z_here, bl.target_z + 1e-12)
    for rec in recs:
        if rec.outcome == Outcome.HIT:
            rec.states["target"] = _ballistic_row(cur[rec.ion_id], bl.target_z)
    shot = ShotRecord(shot_id, recs, phase, jitter)
    if traj is not None:
        shot.trajectory = traj
    return shot


def _tube_inside_speed(prep, T: TubeElement) -> float:
    bl = prep.beamline
    sp = prep.species[0]
    if bl.synthetic is not None:
        v0 = bl.synthetic.speed
    else:
        row = prep._ref_cache.get("v0")
        if row is None:
            ion = IonState(prep.centre + np.asarray(bl.source.offset), np.zeros(3), 0.0, sp)
            st = _trap_stage(prep, [ion], bl.source.rf_trigger_phase, 0.0)[0]
            row = float(np.linalg.norm(st["state"][4:7]))
            prep._ref_cache["v0"] = row
        v0 = row
    return math.sqrt(max(v0**2 - 2 * sp.q_over_m * T.voltage, 1.0))


# ---------------------------------------------------------------------------
# ensembles


class PhasePolicy(str, enum.Enum):
    FIXED = "fixed"
    JITTERED = "jittered"
    SWEPT = "swept"


def shot_phase_and_jitter(bl: Beamline, policy: PhasePolicy, index: int, n_shots: int, seed: int):
    policy = PhasePolicy(policy)
    phase = bl.source.rf_trigger_phase
    jitter = 0.0
    if policy == PhasePolicy.SWEPT:
        phase = phase + 2 * math.pi * index / n_shots
    elif policy == PhasePolicy.JITTERED and bl.trap.jitter_sigma > 0:
        jitter = float(shot_rng(seed, STREAM_JITTER, index).standard_normal()) * bl.trap.jitter_sigma
    return phase, jitter


_WORK: dict = {}


def _worker_run(args):
    idx, n_shots, seed, policy = args
    prep = _WORK["prep"]
    return _one(prep, idx, n_shots, seed, policy)


def _one(prep, idx, n_shots, seed, policy):
    phase, jitter = shot_phase_and_jitter(prep.beamline, policy, idx, n_shots, seed)
    ions = prep.initial_states(idx, seed, phase)
    return run_shot(prep, ions, phase, seed, idx, jitter)


def run_ensemble(beamline: Beamline, n_shots: int, seed: int = 0, phase_policy="fixed", workers: int = 1,
                 cache_dir=None, prep: Optional[Prepared] = None) -> list:
    """Run ``n_shots`` shots; shot i depends only on (beamline, seed, i)."""
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    prep = prep or prepare(beamline, cache_dir)
    policy = PhasePolicy(phase_policy)
    if prep.beamline.lens is not None:
        prep.reference_time(prep.beamline.lens.params.z_entry, beamline.source.rf_trigger_phase)
    if workers <= 1 or n_shots == 1:
        return [_one(prep, i, n_shots, seed, policy) for i in range(n_shots)]
    _WORK["prep"] = prep
    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        out = pool.map(_worker_run, [(i, n_shots, seed, policy) for i in range(n_shots)],
                       chunksize=max(1, n_shots // (4 * workers)))
    _WORK.clear()
    return sorted(out, key=lambda r: r.shot_id)


# ---------------------------------------------------------------------------
# summaries over records


def spot_at(records, z: Optional[float] = None, key: str = "target") -> SpotDiagram:
    """Spot diagram at the target (default) or, reconstructed ballistically, at plane z."""
    rows = []
    for r in records:
        for ion in r.ions:
            if ion.outcome != Outcome.HIT:
                continue
            if z is None:
                s = ion.states[key]
            else:
                f = ion.free_state()
                s = _ballistic_row(f, z)
            rows.append((s[1], s[2], s[0], float(np.linalg.norm(s[4:7])), r.shot_id, ion.ion_id))
    return SpotDiagram(z if z is not None else (rows and records[0].ions[0].states.get(key, [0] * 4)[3]) or 0.0,
                       np.array(rows) if rows else np.zeros((0, 6)))


def hit_speeds(records, species: Optional[str] = None) -> np.ndarray:
    name = None if species is None else species_by_name(species).name
    out = []
    for r in records:
        for ion in r.ions:
            if ion.outcome == Outcome.HIT and (name is None or ion.species == name):
                out.append(np.linalg.norm(ion.states["target"][4:7]))
    return np.array(out)


@dataclass
class FocalResult:
    z: float
    r68: float
    at_boundary: bool
    scan: np.ndarray  # (n, 2) z, r68


def find_focal_plane(records, z_range, n_scan: int = 121) -> FocalResult:
    """Plane of minimum r68 from ballistic reconstruction of post-element states.

    A coarse scan brackets the minimum; golden-section search refines it.
    """
    free = []
    for r in records:
        for ion in r.ions:
            if ion.outcome == Outcome.HIT:
                free.append(ion.free_state())
    if len(free) < 30:
        raise ValueError("focal plane search needs at least 30 surviving trajectories")
    F = np.array(free)

    def f(z):
        dt = (z - F[:, 3]) / F[:, 6]
        xy = F[:, 1:3] + F[:, 4:6] * dt[:, None]
        return r68(SpotDiagram(z, np.column_stack([xy, np.zeros((len(F), 2))])))

    zs = np.linspace(z_range[0], z_range[1], n_scan)
    vals = np.array([f(z) for z in zs])
    k = int(np.argmin(vals))
    lo = zs[max(k - 1, 0)]
    hi = zs[min(k + 1, n_scan - 1)]
    # golden-section refinement
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(60):
        if b - a < 1e-9:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    zbest, rbest = (c, fc) if fc <= fd else (d, fd)
    if vals[k] < rbest:
        zbest, rbest = zs[k], vals[k]
    return FocalResult(float(zbest), float(rbest), k in (0, n_scan - 1), np.column_stack([zs, vals]))


# ---------------------------------------------------------------------------
# studies


@dataclass
class StudyPoint:
    value: float
    mean_speed: float
    speed_spread: float
    r68: float
    n_hits: int


def _stats(records, z=None) -> tuple:
    sp = hit_speeds(records)
    spot = spot_at(records, z)
    rr = r68(spot) if len(spot) >= 3 else math.nan
    return (float(sp.mean()) if len(sp) else math.nan,
            float(sp.std(ddof=1)) if len(sp) > 1 else math.nan, rr, len(sp))


def start_position_study(beamline: Beamline, offsets: Sequence[float], n_shots: int = 100, seed: int = 0,
                         axis: int = 2, workers: int = 1, cache_dir=None, mode: str = "orbit") -> list:
    """Mean speed, speed spread and r68 for ions displaced from the potential minimum.

    mode "orbit": the ion was displaced and released, so at the trigger it
    sits on a secular orbit of that amplitude at a random phase.
    mode "static": the thermal cloud is centred on the displaced point.
    """
    if mode not in ("orbit", "static"):
        raise ValueError("mode must be 'orbit' or 'static'")
    out = []
    for off in offsets:
        o = [0.0, 0.0, 0.0]
        o[axis] = float(off)
        field_name = "orbit" if mode == "orbit" else "offset"
        bl = beamline.replace(source=dataclasses.replace(beamline.source, **{field_name: tuple(o)}))
        rec = run_ensemble(bl, n_shots, seed, "fixed", workers, cache_dir)
        out.append(StudyPoint(float(off), *_stats(rec)))
    return out


def phase_study(beamline: Beamline, phases: Sequence[float], n_shots: int = 100, seed: int = 0,
                workers: int = 1, cache_dir=None) -> list:
    out = []
    for ph in phases:
        bl = beamline.replace(source=dataclasses.replace(beamline.source, rf_trigger_phase=float(ph)))
        rec = run_ensemble(bl, n_shots, seed, "fixed", workers, cache_dir)
        out.append(StudyPoint(float(ph), *_stats(rec)))
    return out


@dataclass
class ReflectionResult:
    passes: bool
    reflected: bool
    threshold: float
    trace: list  # (voltage, reflected)
    monotone: bool


def reflects(beamline: Beamline, voltage: float, species: str = "Ca40", cache_dir=None, prep=None) -> bool:
    """Does a cold on-axis ion of ``species`` turn around in the lens at ``voltage``?"""
    lens = dataclasses.replace(beamline.lens, voltage=float(voltage), schedule=None)
    bl = beamline.replace(lens=lens, source=dataclasses.replace(beamline.source, species=(species,),
                                                                temperature=0.0))
    p = prepare(bl, cache_dir)
    ions = p.initial_states(0, 0, bl.source.rf_trigger_phase)
    rec = run_shot(p, ions, bl.source.rf_trigger_phase)
    return rec.ions[0].outcome == Outcome.REFLECTED


def classify_reflection(beamline: Beamline, species: str = "Ca40", voltage: Optional[float] = None,
                        bracket=(0.0, 300.0), tol: float = 0.05, cache_dir=None) -> ReflectionResult:
    """Bisection on the centre-electrode voltage for the reflection threshold."""
    lo, hi = bracket
    trace = []
    r_lo = reflects(beamline, lo, species, cache_dir)
    r_hi = reflects(beamline, hi, species, cache_dir)
    trace += [(lo, r_lo), (hi, r_hi)]
    if r_lo or not r_hi:
        raise ValueError("bracket does not contain the reflection threshold")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        r = reflects(beamline, mid, species, cache_dir)
        trace.append((mid, r))
        if r:
            hi = mid
        else:
            lo = mid
    v = beamline.lens.voltage if voltage is None else voltage
    refl = reflects(beamline, v, species, cache_dir)
    trace.append((v, refl))
    srt = sorted(trace)
    mono = all(not (a[1] and not b[1]) for a, b in zip(srt, srt[1:]))
    return ReflectionResult(not refl, refl, 0.5 * (lo + hi), trace, mono)


def misalignment_study(beamline: Beamline, offsets: Sequence[float], focal_z: float, n_shots: int = 100,
                       seed: int = 0, workers: int = 1, cache_dir=None) -> list:
    """r68 at a fixed plane with the lens displaced laterally (x) relative to the beam.

    Displacing the lens is emulated by shifting every incoming trajectory by
    -offset, which is exact for an axisymmetric lens.
    """
    base = run_ensemble(beamline.replace(lens=None, target_z=beamline.lens.params.z_entry - beamline.lens.region_margin),
                        n_shots, seed, "fixed", workers, cache_dir)
    prep = prepare(beamline, cache_dir)
    out = []
    for off in offsets:
        recs = []
        for r in base:
            shifted = []
            for ion in r.ions:
                if ion.outcome != Outcome.HIT:
                    continue
                s = ion.states["handoff"].copy()
                s[1] += float(off)
                shifted.append(s)
            recs.append(_relens(prep, shifted, r.shot_id, r.phase))
        spot = spot_at(recs, focal_z)
        out.append((float(off), r68(spot) if len(spot) >= 3 else math.nan, spot.centroid))
    return out


def _relens(prep: Prepared, states, shot_id, phase) -> ShotRecord:
    bl = prep.beamline
    sp = prep.species[0]
    ions = [IonState(s[1:4], s[4:7], s[0], sp) for s in states]
    # feed the states in as a synthetic handoff
    recs = [IonRecord(i, sp.name, Outcome.HIT, {"handoff": s}) for i, s in enumerate(states)]
    L = bl.lens
    lp = L.params
    t_in = prep.reference_time(lp.z_entry, phase)
    prog = apply_switch_schedule(L, L.schedule, t_in)
    solids = build_lens(lp).solids
    for rec, s in zip(recs, states):
        d = _axisym_stage(prep.lens_series, prog, prep.lens_channels, s, sp, lp.z_entry - L.region_margin,
                          lp.z_exit + L.region_margin, lp.outer_radius * 5, solids, bl.tolerances)
        if d["outcome"] is not None:
            rec.outcome = d["outcome"]
        else:
            rec.states["lens_out"] = d["state"]
            rec.states["target"] = _ballistic_row(d["state"], bl.target_z)
    return ShotRecord(shot_id, recs, phase, 0.0)


def deflection_centroid(beamline: Beamline, u1: float, u2: float, n_shots: int = 20, seed: int = 0,
                        cache_dir=None) -> np.ndarray:
    bl = beamline.replace(deflection=(float(u1), float(u2)))
    rec = run_ensemble(bl, n_shots, seed, "fixed", 1, cache_dir)
    return spot_at(rec).centroid


def post_accelerate(beamline: Beamline, n_shots: int = 50, seed: int = 0, z_range=None, cache_dir=None):
    """Speeds and focal spot behind the post-acceleration tube."""
    rec = run_ensemble(beamline, n_shots, seed, "fixed", 1, cache_dir)
    sp = hit_speeds(rec)
    tp = beamline.tube.params
    z_end = tp.axial_position + tp.length
    zr = z_range or (z_end, z_end + 0.2)
    foc = find_focal_plane(rec, zr) if len(sp) >= 30 else None
    return {"mean_speed": float(sp.mean()) if len(sp) else math.nan, "records": rec, "focal": foc}
