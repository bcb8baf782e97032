"""Parameter sweeps and bounded Nelder-Mead minimization of beam metrics.

Every evaluation of a scenario reuses the same base seed (common random
numbers), so a metric is a deterministic function of the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import beamline as bl_mod
from .diagnostics import DetectionModel, InsufficientDataError, SpotDiagram, r68, transmission
from .geometry import Aperture

METRICS = ("r68_at_plane", "focal_r68", "mean_speed", "speed_spread", "transmission")


@dataclass(frozen=True)
class SweepSpec:
    parameter: str  # scenario key path, e.g. "voltages.lens_v"
    values: tuple
    metric: str = "r68_at_plane"
    plane_z: Optional[float] = None
    focal_range: Optional[tuple] = None
    n_shots: int = 200
    seed: int = 0
    aperture: Optional[Aperture] = None
    detection: DetectionModel = DetectionModel()

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError("sweep grid must be non-empty")
        _check_metric(self.metric)


@dataclass(frozen=True)
class ParameterBound:
    path: str
    lower: float
    upper: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError(f"bounds of {self.path} must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"bounds of {self.path} need lower < upper")


@dataclass(frozen=True)
class OptimizeSpec:
    parameters: tuple  # ParameterBound
    metric: str = "focal_r68"
    budget: int = 40
    seed: int = 0
    n_shots: int = 200
    plane_z: Optional[float] = None
    focal_range: Optional[tuple] = None
    start: Optional[tuple] = None
    xtol: float = 1e-4  # fraction of each bound interval
    ftol: float = 0.0
    aperture: Optional[Aperture] = None
    detection: DetectionModel = DetectionModel()
    probes: int = 0  # scrambled Sobol points evaluated before the simplex search

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(self.parameters))
        if not self.parameters:
            raise ValueError("no parameters to optimize")
        if self.budget < len(self.parameters) + 2:
            raise ValueError("budget must be >= dimension + 2")
        if not 0 <= self.probes <= self.budget - len(self.parameters) - 2:
            raise ValueError("probes must leave at least dimension + 2 evaluations of the budget")
        _check_metric(self.metric)


def _check_metric(m):
    if m not in METRICS:
        raise ValueError(f"unknown metric {m!r}; known: {list(METRICS)}")


# ---------------------------------------------------------------------------
# metrics


def _bootstrap_r68(xy: np.ndarray, seed: int, n_boot: int = 200) -> float:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7,)))
    n = len(xy)
    vals = np.empty(n_boot)
    for b in range(n_boot):
        s = xy[rng.integers(0, n, n)]
        vals[b] = r68(SpotDiagram(0.0, np.column_stack([s, np.zeros((n, 2))])))
    return float(vals.std(ddof=1))


def metric_from_records(records, metric: str, plane_z=None, focal_range=None, aperture=None,
                        detection: DetectionModel = DetectionModel(), seed: int = 0,
                        n_launched: Optional[int] = None):
    """(value, standard uncertainty) of ``metric`` over shot records."""
    _check_metric(metric)
    if metric in ("mean_speed", "speed_spread"):
        v = bl_mod.hit_speeds(records)
        n = len(v)
        if n < 2:
            return math.nan, math.nan
        s = float(v.std(ddof=1))
        if metric == "mean_speed":
            return float(v.mean()), s / math.sqrt(n)
        return s, s / math.sqrt(2 * (n - 1))
    if metric == "focal_r68":
        if focal_range is None:
            raise ValueError("focal_r68 needs a focal search range")
        try:
            foc = bl_mod.find_focal_plane(records, focal_range)
        except ValueError:
            return math.nan, math.nan
        spot = bl_mod.spot_at(records, foc.z)
        return foc.r68, _bootstrap_r68(spot.xy, seed)
    spot = bl_mod.spot_at(records, plane_z)
    if metric == "transmission":
        if aperture is None:
            raise ValueError("transmission needs an aperture")
        nl = n_launched if n_launched is not None else sum(len(r.ions) for r in records)
        if len(spot) == 0:
            return 0.0, 0.0
        t = transmission(spot, aperture, detection, n_mc=max(10000, 10 * nl), seed=seed, n_launched=nl)
        return t.probability, 0.5 * (t.high - t.low) / 1.959963984540054
    try:
        return r68(spot), _bootstrap_r68(spot.xy, seed)
    except InsufficientDataError:
        return math.nan, math.nan


def evaluate_scenario(scenario, metric: str, n_shots: int, seed: int, plane_z=None, focal_range=None,
                      aperture=None, detection=DetectionModel(), workers: int = 1, cache_dir=None):
    """Run one ensemble of a scenario and reduce it to (metric, uncertainty)."""
    beam = scenario.beamline()
    recs = bl_mod.run_ensemble(beam, n_shots, seed, scenario.phase_policy, workers, cache_dir)
    return metric_from_records(recs, metric, plane_z, focal_range, aperture, detection, seed)


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepPoint:
    value: float
    metric: float
    uncertainty: float


def sweep(scenario, spec: SweepSpec, workers: int = 1, cache_dir=None,
          evaluate: Optional[Callable] = None) -> list:
    """One ensemble per grid value, all with the spec's base seed.

    ``evaluate(scenario) -> (metric, uncertainty)`` replaces the ensemble
    evaluation when given.
    """
    out = []
    for v in spec.values:
        sc = scenario.with_value(spec.parameter, v)
        if evaluate is not None:
            m, u = evaluate(sc)
        else:
            m, u = evaluate_scenario(sc, spec.metric, spec.n_shots, spec.seed, spec.plane_z, spec.focal_range,
                                     spec.aperture, spec.detection, workers, cache_dir)
        out.append(SweepPoint(v, float(m), float(u)))
    return out


# ---------------------------------------------------------------------------
# Nelder-Mead


@dataclass
class TraceEntry:
    index: int
    params: tuple
    metric: float
    uncertainty: float


@dataclass
class OptimizeResult:
    best_params: dict
    best_metric: float
    trace: list
    budget_exhausted: bool
    n_evaluations: int = 0
    best_uncertainty: float = math.nan


def _fold(u: np.ndarray) -> np.ndarray:
    """Reflect unit-box coordinates back into [0, 1]."""
    u = np.mod(u, 2.0)
    return np.where(u > 1.0, 2.0 - u, u)


def nelder_mead(f: Callable, bounds: Sequence[tuple], budget: int, start=None, xtol: float = 1e-4,
                ftol: float = 0.0, initial_step: float = 0.25, probes: int = 0, seed: int = 0):
    """Bounded Nelder-Mead on the box ``bounds``.

    Points leaving the box are reflected at its faces. Vertices with equal
    values are ordered lexicographically by parameter vector. With
    ``probes`` > 0 that many scrambled Sobol points (seeded by ``seed``) are
    evaluated first and the simplex starts at the best of them and ``start``;
    this guards against narrow valleys far from the starting point. Returns
    (best x, best f, trace [(x, f, extra)], exhausted flag).
    """
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    d = len(lo)
    if budget < d + 2:
        raise ValueError("budget must be >= dimension + 2")
    trace = []
    memo = {}

    def to_x(u):
        return lo + (hi - lo) * u

    class Exhausted(Exception):
        pass

    def F(u):
        u = _fold(np.asarray(u, dtype=float))
        x = to_x(u)
        key = tuple(np.round(x, 15))
        if key in memo:
            return memo[key], u
        if len(trace) >= budget:
            raise Exhausted
        r = f(x)
        val, extra = (r if isinstance(r, tuple) else (r, math.nan))
        val = float(val)
        if not math.isfinite(val):
            val = math.inf
        memo[key] = val
        trace.append((tuple(float(v) for v in x), val, extra))
        return val, u

    def order(simplex):
        simplex.sort(key=lambda p: (p[0], tuple(to_x(p[1]))))

    u0 = np.full(d, 0.5) if start is None else (np.asarray(start, dtype=float) - lo) / (hi - lo)
    exhausted = False
    simplex = []
    try:
        if probes > 0:
            pts = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed)).random(probes)
            cands = [F(u0)] + [F(u) for u in pts]
            u0 = min(cands, key=lambda p: (p[0], tuple(to_x(p[1]))))[1]
        simplex.append(F(u0))
        for k in range(d):
            e = u0.copy()
            e[k] += initial_step if u0[k] + initial_step <= 1.0 else -initial_step
            simplex.append(F(e))
        while True:
            order(simplex)
            fs = np.array([p[0] for p in simplex])
            us = np.array([p[1] for p in simplex])
            size = np.max(np.abs(us[1:] - us[0]))
            spread = fs[-1] - fs[0]
            if size <= xtol or (ftol > 0 and np.isfinite(spread) and spread <= ftol):
                break
            c = us[:-1].mean(axis=0)
            fr, ur = F(c + (c - us[-1]))
            if fr < fs[0]:
                fe, ue = F(c + 2.0 * (c - us[-1]))
                simplex[-1] = (fe, ue) if fe < fr else (fr, ur)
                continue
            if fr < fs[-2]:
                simplex[-1] = (fr, ur)
                continue
            if fr < fs[-1]:
                fc, uc = F(c + 0.5 * (ur - c))
                if fc <= fr:
                    simplex[-1] = (fc, uc)
                    continue
            else:
                fc, uc = F(c + 0.5 * (us[-1] - c))
                if fc < fs[-1]:
                    simplex[-1] = (fc, uc)
                    continue
            for k in range(1, len(simplex)):
                simplex[k] = F(us[0] + 0.5 * (simplex[k][1] - us[0]))
    except Exhausted:
        exhausted = True
    best = min(trace, key=lambda t: (t[1], t[0]))
    return np.array(best[0]), best[1], trace, exhausted


def minimize(scenario, spec: OptimizeSpec, workers: int = 1, cache_dir=None,
             objective: Optional[Callable] = None) -> OptimizeResult:
    """Bounded Nelder-Mead over scenario parameters.

    ``objective(params: dict) -> metric or (metric, uncertainty)`` replaces
    the ensemble evaluation when given (``scenario`` may then be None).
    """
    paths = [p.path for p in spec.parameters]

    def f(x):
        params = dict(zip(paths, (float(v) for v in x)))
        if objective is not None:
            return objective(params)
        sc = scenario
        for k, v in params.items():
            sc = sc.with_value(k, v)
        return evaluate_scenario(sc, spec.metric, spec.n_shots, spec.seed, spec.plane_z, spec.focal_range,
                                 spec.aperture, spec.detection, workers, cache_dir)

    bx, bf, trace, exhausted = nelder_mead(f, [(p.lower, p.upper) for p in spec.parameters], spec.budget,
                                           spec.start, spec.xtol, spec.ftol, probes=spec.probes, seed=spec.seed)
    entries = [TraceEntry(i, x, m, u) for i, (x, m, u) in enumerate(trace)]
    bu = next(e.uncertainty for e in entries if e.params == tuple(float(v) for v in bx))
    return OptimizeResult(dict(zip(paths, bx.tolist())), bf, entries, exhausted, len(entries), bu)


# ---------------------------------------------------------------------------
# deflection scans


def deflection_scan(scenario, u1_grid, u2_grid, aperture: Aperture, detection: DetectionModel = DetectionModel(),
                    n_shots: int = 100, seed: int = 0, workers: int = 1, cache_dir=None,
                    plane_z: Optional[float] = None) -> np.ndarray:
    """Transmission probability map (len(u1_grid), len(u2_grid))."""
    out = np.zeros((len(u1_grid), len(u2_grid)))
    for i, u1 in enumerate(u1_grid):
        for j, u2 in enumerate(u2_grid):
            sc = scenario.with_value("voltages.deflection_v", [float(u1), float(u2)])
            beam = sc.beamline()
            recs = bl_mod.run_ensemble(beam, n_shots, seed, sc.phase_policy, workers, cache_dir)
            spot = bl_mod.spot_at(recs, plane_z)
            if len(spot) == 0:
                continue
            out[i, j] = transmission(spot, aperture, detection, n_mc=10000, seed=seed,
                                     n_launched=sum(len(r.ions) for r in recs)).probability
    return out


def write_trace_csv(path, names: Sequence[str], entries) -> None:
    """Columns: eval_index, one per parameter, metric, uncertainty."""
    with open(path, "w") as fh:
        fh.write(",".join(["eval_index", *names, "metric", "uncertainty"]) + "\n")
        for e in entries:
            if isinstance(e, SweepPoint):
                idx, params, m, u = entries.index(e), (e.value,), e.metric, e.uncertainty
            else:
                idx, params, m, u = e.index, e.params, e.metric, e.uncertainty
            fh.write(",".join([str(idx), *(f"{p:.15e}" for p in params), f"{m:.15e}", f"{u:.15e}"]) + "\n")
