"""Time-dependent electrode voltage programs."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np


class RampShape(str, enum.Enum):
    LINEAR = "linear"


@dataclass(frozen=True)
class SwitchEvent:
    trigger_time: float  # s
    target: float  # V
    rise_time: float = 5e-9  # s
    shape: RampShape = RampShape.LINEAR
    jittered: bool = True

    def __post_init__(self):
        if self.rise_time < 0:
            raise ValueError("rise_time must be >= 0")
        object.__setattr__(self, "shape", RampShape(self.shape))


@dataclass(frozen=True)
class RfTerm:
    amplitude: float  # V
    omega: float  # rad/s
    phase: float = 0.0  # rad

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("rf angular frequency must be > 0")

    @property
    def period(self) -> float:
        return 2 * math.pi / self.omega


@dataclass(frozen=True)
class ElectrodeProgram:
    dc: float = 0.0
    rf: Optional[RfTerm] = None
    events: tuple = ()

    def __post_init__(self):
        times = [e.trigger_time for e in self.events]
        if times != sorted(times):
            raise ValueError("switch events must be time ordered")

    def signature(self):
        return (self.dc, self.rf, self.events)


@dataclass(frozen=True)
class VoltageProgram:
    """Per-electrode voltage law. Electrodes not listed sit at 0 V.

    ``jitter_sigma`` is the standard deviation (s) of the trigger delay;
    ``voltage_at`` takes the realized draw explicitly.
    """

    electrodes: Mapping[str, ElectrodeProgram] = field(default_factory=dict)
    jitter_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "electrodes", dict(self.electrodes))
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")

    def get(self, name: str) -> ElectrodeProgram:
        return self.electrodes.get(name, ElectrodeProgram())

    def with_electrode(self, name: str, prog: ElectrodeProgram) -> "VoltageProgram":
        e = dict(self.electrodes)
        e[name] = prog
        return replace(self, electrodes=e)

    def static_voltages(self, t: float = -np.inf) -> dict:
        """dc levels (and switched levels reached by time t), no rf."""
        out = {}
        for n, p in self.electrodes.items():
            out[n] = _level(p, t, 0.0, include_rf=False)
        return out

    def rf_amplitudes(self) -> dict:
        return {n: p.rf.amplitude for n, p in self.electrodes.items() if p.rf is not None}

    def rf_omega(self) -> Optional[float]:
        om = {p.rf.omega for p in self.electrodes.values() if p.rf is not None and p.rf.amplitude != 0}
        if len(om) > 1:
            raise ValueError("multiple rf frequencies are not supported")
        return om.pop() if om else None

    def breakpoints(self, jitter_draw: float = 0.0) -> np.ndarray:
        pts = set()
        for p in self.electrodes.values():
            for e in p.events:
                t0 = e.trigger_time + (jitter_draw if e.jittered else 0.0)
                pts.add(t0)
                pts.add(t0 + e.rise_time)
        return np.array(sorted(pts), dtype=float)


def _level(p: ElectrodeProgram, t: float, jitter: float, include_rf: bool = True) -> float:
    v = p.dc
    for e in p.events:
        t0 = e.trigger_time + (jitter if e.jittered else 0.0)
        if t >= t0 + e.rise_time:
            v = e.target
        elif t > t0:
            v = v + (e.target - v) * (t - t0) / e.rise_time
        else:
            break
    if include_rf and p.rf is not None:
        v += p.rf.amplitude * math.cos(p.rf.omega * t + p.rf.phase)
    return v


def voltage_at(program: VoltageProgram, electrode: str, t: float, jitter_draw: float = 0.0) -> float:
    """Voltage (V) of one electrode at time t with trigger times shifted by jitter_draw."""
    return _level(program.get(electrode), t, jitter_draw)


@dataclass
class CompiledProgram:
    """Channel-wise arrays consumed by the compiled integrator."""

    channels: list
    dc: np.ndarray
    amp: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    offsets: np.ndarray
    ev_t: np.ndarray
    ev_v: np.ndarray
    ev_rise: np.ndarray
    breakpoints: np.ndarray

    def as_tuple(self):
        return (self.dc, self.amp, self.omega, self.phase, self.offsets, self.ev_t, self.ev_v, self.ev_rise)

    @property
    def has_rf(self) -> bool:
        return bool(np.any(self.amp != 0))


def compile_program(program: VoltageProgram, channels: Sequence[Sequence[str]],
                    jitter_draw: float = 0.0, t_shift: float = 0.0) -> CompiledProgram:
    """Map electrode programs onto field channels.

    ``channels[c]`` lists the electrodes superposed in channel c; they must
    share one program. Event times and rf phases are re-referenced to a
    clock that reads zero at program time ``t_shift``.
    """
    nch = len(channels)
    dc = np.zeros(nch)
    amp = np.zeros(nch)
    om = np.ones(nch)
    ph = np.zeros(nch)
    offsets = [0]
    et, ev, er = [], [], []
    for c, names in enumerate(channels):
        progs = [program.get(n) for n in names]
        sig = progs[0].signature()
        if any(p.signature() != sig for p in progs[1:]):
            raise ValueError(f"electrodes {list(names)} share a channel but have different programs")
        p = progs[0]
        dc[c] = p.dc
        if p.rf is not None:
            amp[c] = p.rf.amplitude
            om[c] = p.rf.omega
            ph[c] = p.rf.phase + p.rf.omega * t_shift
        for e in p.events:
            t0 = e.trigger_time + (jitter_draw if e.jittered else 0.0) - t_shift
            et.append(t0)
            ev.append(e.target)
            er.append(e.rise_time)
        offsets.append(len(et))
    bps = program.breakpoints(jitter_draw) - t_shift
    return CompiledProgram([list(c) for c in channels], dc, amp, om, ph,
                           np.asarray(offsets, dtype=np.int64), np.asarray(et, dtype=float),
                           np.asarray(ev, dtype=float), np.asarray(er, dtype=float), bps)


def constant_program(voltages: Mapping[str, float]) -> VoltageProgram:
    return VoltageProgram({k: ElectrodeProgram(dc=float(v)) for k, v in voltages.items()})


def group_channels(program: VoltageProgram, names: Sequence[str], separate: Sequence[str] = ()) -> list:
    """Group electrodes sharing one program into field channels.

    Electrodes that sit at 0 V throughout are dropped, except those listed in
    ``separate``, which always get a channel of their own (so that their
    voltages can change without rebuilding a field map).
    """
    groups: dict = {}
    out = []
    for n in names:
        p = program.get(n)
        if n in separate:
            out.append([n])
            continue
        if p.dc == 0.0 and p.rf is None and all(e.target == 0.0 for e in p.events):
            continue
        groups.setdefault(repr(p.signature()), []).append(n)
    out.extend(groups.values())
    return sorted(out, key=lambda c: (c[0] not in separate, c[0]))
