"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line and asserts the same
condition it prints. Run with ``pytest tests/test_acceptance.py -v -s`` or as
a script: ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import math
import os
import time

import numpy as np
import pytest

from ionsource import beamline as bl
from ionsource import cli
from ionsource import optimize as opt
from ionsource.diagnostics import r68, velocity_stats
from ionsource.dynamics.chain import chain_equilibrium
from ionsource.dynamics.integrate import QuadraticSource
from ionsource.dynamics.program import ElectrodeProgram, RfTerm, VoltageProgram
from ionsource.dynamics.secular import secular_frequencies
from ionsource.dynamics.species import CA40
from ionsource.constants import COULOMB_K, E_CHARGE
from ionsource.fields.analytic import QuadrupoleParams
from ionsource.fields.bem import solve_basis
from ionsource.geometry import LensDesign, LensParams, build_parallel_plates, build_sphere, panelize
from ionsource.scenario import preset_scenario

WORKERS = int(os.environ.get("IONSRC_WORKERS", "1"))
SEED = 0
TWO_PI = 2 * math.pi

# 26-point degree-7 spherical rule: 6 axis, 12 edge and 8 corner directions.
_AXES = np.array([[s * (i == k) for k in range(3)] for i in range(3) for s in (1, -1)], float)
_EDGES = np.array([v for i in range(3) for v in
                   [np.insert(np.array([a, b]) / math.sqrt(2), i, 0.0) for a in (1, -1) for b in (1, -1)]])
_CORNERS = np.array([[a, b, c] for a in (1, -1) for b in (1, -1) for c in (1, -1)], float) / math.sqrt(3)
SPHERE_RULE = (np.vstack([_AXES, _EDGES, _CORNERS]),
               np.r_[np.full(6, 1 / 21), np.full(12, 4 / 105), np.full(8, 9 / 280)])


@functools.lru_cache(maxsize=None)
def fig1_records(temperature: float = 2e-3, n_shots: int = 300):
    sc = preset_scenario("fig1").with_value("source.temperature_k", temperature)
    return bl.run_ensemble(sc.beamline(), n_shots, sc.seed, sc.phase_policy, WORKERS)


def _within(x, target, rel):
    return abs(x - target) <= rel * abs(target)


# ---------------------------------------------------------------------------


def test_criterion_01_sphere_oracle(criterion):
    t0 = time.perf_counter()
    basis = solve_basis(panelize(build_sphere(1.0), 0.12), use_cache=False)
    radii = np.array([2.0, 5.0, 10.0])
    dirs = np.array([[1, 0, 0], [0.6, 0.8, 0], [0, 0.28, 0.96]])
    phi = basis.potential(dirs * radii[:, None], {"sphere": 1.0})
    err_r = np.abs(phi * radii - 1.0)

    rng = np.random.default_rng(7)
    u = rng.standard_normal((100, 3))
    centres = u / np.linalg.norm(u, axis=1)[:, None] * rng.uniform(1.5, 6.0, 100)[:, None]
    rho = 0.2
    dirs26, w26 = SPHERE_RULE
    pts = (centres[:, None, :] + rho * dirs26[None]).reshape(-1, 3)
    shell = basis.potential(pts, {"sphere": 1.0}).reshape(100, 26) @ w26
    mid = basis.potential(centres, {"sphere": 1.0})
    harm = np.max(np.abs(shell - mid) / np.abs(mid))

    plates = solve_basis(panelize(build_parallel_plates(10e-3, 1e-3), 0.8e-3), use_cache=False)
    q = rng.uniform(-4e-3, 4e-3, (100, 3))
    q[:, 2] = rng.uniform(-0.4e-3, 0.4e-3, 100)
    v1, v2 = {"top": 3.0, "bottom": -1.0}, {"top": -0.5, "bottom": 2.0}
    a, b = 1.7, -0.3
    lhs = plates.potential(q, {k: a * v1[k] + b * v2[k] for k in v1})
    rhs = a * plates.potential(q, v1) + b * plates.potential(q, v2)
    lin = np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs))
    dt = time.perf_counter() - t0

    ok = bool(np.all(err_r < 0.01) and harm < 1e-4 and lin < 1e-9 and dt < 60)
    criterion(1, ok, f"a/r errors {np.round(err_r * 100, 3).tolist()} %, harmonicity {harm:.1e}, "
                      f"linearity {lin:.1e}, {dt:.1f} s")
    assert ok


def test_criterion_02_mathieu(criterion):
    t0 = time.perf_counter()
    qp = QuadrupoleParams(rf_amplitude=200.0, rf_frequency=TWO_PI * 12.155e6, r0=1e-3)
    H, g = qp.quadratic_channels()
    src = QuadraticSource(H, g, [["rf"], ["dc"]])
    prog = VoltageProgram({"rf": ElectrodeProgram(rf=RfTerm(200.0, qp.rf_frequency, 0.0)),
                           "dc": ElectrodeProgram(dc=0.0)})
    w = secular_frequencies(src, prog, CA40)[:2]
    oracle = qp.secular_floquet(CA40.mass)
    rel = np.max(np.abs(w / oracle - 1))
    dt = time.perf_counter() - t0
    q = qp.mathieu_q(CA40.mass)
    ok = bool(rel < 0.01 and abs(q - 0.165) < 0.005 and dt < 60)
    criterion(2, ok, f"q={q:.4f}, simulated {w[0] / TWO_PI / 1e3:.2f} kHz, Floquet {oracle / TWO_PI / 1e3:.2f} kHz, "
                      f"first order {qp.secular_first_order(CA40.mass) / TWO_PI / 1e3:.2f} kHz, rel {rel:.1e}")
    assert ok


def test_criterion_03_trap_frequencies(criterion):
    t0 = time.perf_counter()
    prep = bl.prepare(bl.Beamline())
    f = np.sort(prep.omegas / TWO_PI)
    f_ax, f_rad = f[0], f[1:]
    dt = time.perf_counter() - t0
    ok = bool(_within(f_ax, 280e3, 0.15) and all(_within(x, 430e3, 0.15) for x in f_rad) and dt < 600)
    criterion(3, ok, f"axial {f_ax / 1e3:.1f} kHz, radial {f_rad[0] / 1e3:.1f}/{f_rad[1] / 1e3:.1f} kHz, {dt:.0f} s")
    assert ok


def test_criterion_04_fig1_ensemble(criterion):
    t0 = time.perf_counter()
    recs = fig1_records()
    dt = time.perf_counter() - t0
    vs = velocity_stats(bl.hit_speeds(recs))
    rr = r68(bl.spot_at(recs, 0.247))
    div = 2 * rr / 0.247
    ok = bool(_within(vs.mean, 22.1e3, 0.15) and vs.spread <= 5.0 and 16.5e-6 / 2 <= rr <= 16.5e-6 * 2
              and 134e-6 / 2 <= div <= 134e-6 * 2 and dt < 600)
    criterion(4, ok, f"mean {vs.mean:.0f} m/s, spread {vs.spread:.2f} m/s, r68 {rr * 1e6:.2f} um, "
                      f"divergence {div * 1e6:.0f} urad, {dt:.0f} s")
    assert ok


def test_criterion_05_temperature_scaling(criterion):
    hot = r68(bl.spot_at(fig1_records(2e-3), 0.247))
    cold = r68(bl.spot_at(fig1_records(1e-4), 0.247))
    ratio = hot / cold
    ok = bool(_within(ratio, math.sqrt(20), 0.10))
    criterion(5, ok, f"r68 {hot * 1e6:.2f} / {cold * 1e6:.2f} um = {ratio:.3f} (sqrt 20 = {math.sqrt(20):.3f})")
    assert ok


def test_criterion_06_start_position(criterion):
    beam = preset_scenario("fig2").beamline()
    offsets = [0.0, 140e-6, 280e-6, 420e-6]
    pts = bl.start_position_study(beam, offsets, 100, SEED, axis=2, workers=WORKERS, mode="orbit")
    spread = np.array([p.speed_spread for p in pts])
    ok = bool(spread[0] <= 5.0 and np.all(np.diff(spread) > 0) and spread[-1] > 100 * spread[0])
    criterion(6, ok, "spreads " + ", ".join(f"{o * 1e6:.0f} um: {s:.2f} m/s" for o, s in zip(offsets, spread)))
    assert ok


def test_criterion_07_phase_study(criterion):
    beam = preset_scenario("fig3").beamline()
    phases = np.linspace(0, TWO_PI, 16, endpoint=False)
    pts = bl.phase_study(beam, phases, 100, SEED, WORKERS)
    v = np.array([p.mean_speed for p in pts])
    rr = np.array([p.r68 for p in pts])
    A = np.column_stack([np.ones_like(phases), np.cos(phases), np.sin(phases)])
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - A @ coef
    fit_quality = 1 - resid.var() / v.var()
    p2p = 2 * math.hypot(coef[1], coef[2])
    k = r68(bl.spot_at(fig1_records(), 0.247)) / 16.5e-6
    lo, hi = 16e-6 * k, 19e-6 * k
    speed_ok = 0.25e3 <= p2p <= 0.75e3 and _within(coef[0], 22.1e3, 0.15) and fit_quality > 0.9
    band_ok = bool(np.all((rr >= lo) & (rr <= hi)))
    ok = bool(speed_ok and band_ok)
    criterion(7, ok, f"offset {coef[0]:.0f} m/s, peak-to-peak {p2p:.0f} m/s, R^2 {fit_quality:.3f}; "
                      f"r68 {rr.min() * 1e6:.2f}..{rr.max() * 1e6:.2f} um vs band "
                      f"{lo * 1e6:.2f}..{hi * 1e6:.2f} um (k={k:.3f})")
    assert ok


def test_criterion_08_lens_focus(criterion):
    sc = preset_scenario("fig6")
    z_exit = LensParams(design=LensDesign.CUSTOM_ASYMMETRIC).z_exit
    recs65 = bl.run_ensemble(sc.beamline(), 300, sc.seed, sc.phase_policy, WORKERS)
    f65 = bl.find_focal_plane(recs65, (z_exit - 1e-3, z_exit + 20e-3))
    s50 = sc.with_value("voltages.lens_v", 50.0)
    recs50 = bl.run_ensemble(s50.beamline(), 300, sc.seed, sc.phase_policy, WORKERS)
    f50 = bl.find_focal_plane(recs50, (z_exit - 1e-3, z_exit + 0.2))
    worst = 0.0
    for r in recs65:
        for ion in r.hits():
            a = np.dot(ion.states["handoff"][4:7], ion.states["handoff"][4:7])
            b = np.dot(ion.states["lens_out"][4:7], ion.states["lens_out"][4:7])
            worst = max(worst, abs(b - a) / a)
    d65, d50 = f65.z - z_exit, f50.z - z_exit
    ok65 = -0.5e-3 <= d65 <= 1.5e-3 and 11e-9 / 3 <= f65.r68 <= 33e-9
    ok50 = 5.5e-3 <= d50 <= 11.5e-3 and 12e-9 / 3 <= f50.r68 <= 36e-9
    ok = bool(ok65 and ok50 and worst <= 1e-6)
    criterion(8, ok, f"65 V: focus {d65 * 1e3:.2f} mm past exit, r68 {f65.r68 * 1e9:.1f} nm; "
                      f"50 V: focus {d50 * 1e3:.2f} mm, r68 {f50.r68 * 1e9:.1f} nm; max dE/E {worst:.1e}")
    assert ok


def test_criterion_09_switched_lens(criterion):
    sc = preset_scenario("fig8")
    st = sc.study
    fr = tuple(st["focal_range_m"])
    static = sc.with_value("voltages.lens_switch", None)
    # the static baseline gets the same search effort per dimension as the switched one
    s_spec = opt.OptimizeSpec((opt.ParameterBound("voltages.lens_v", 25.0, 100.0),), "focal_r68", 20, SEED,
                              st["n_shots"], focal_range=fr, probes=8)
    best_static = opt.minimize(static, s_spec, WORKERS)
    bounds = tuple(opt.ParameterBound(p["path"], p["lower"], p["upper"]) for p in st["parameters"])
    d_spec = opt.OptimizeSpec(bounds, "focal_r68", st["budget"], SEED, st["n_shots"], focal_range=fr,
                              probes=st["probes"])
    best_dyn = opt.minimize(sc, d_spec, WORKERS)
    gain = best_static.best_metric / best_dyn.best_metric
    ok = bool(gain >= 1.5)
    p = best_dyn.best_params
    criterion(9, ok, f"static {best_static.best_metric * 1e9:.1f} nm at "
                      f"{best_static.best_params['voltages.lens_v']:.2f} V; switched "
                      f"{best_dyn.best_metric * 1e9:.1f} nm (v2 {p['voltages.lens_switch.v2_v']:.1f} V, "
                      f"delay {p['voltages.lens_switch.delay_s'] * 1e9:.0f} ns); gain {gain:.2f}")
    assert ok


def test_criterion_10_reflection(criterion):
    sc = preset_scenario("fig9")
    st = sc.study
    r = bl.classify_reflection(sc.beamline(), st["species"], None, tuple(st["bracket_v"]), st["tol_v"])
    ok = bool(r.threshold is not None and _within(r.threshold, 110.0, 0.10) and r.reflected and r.monotone)
    criterion(10, ok, f"threshold {r.threshold:.2f} V, 115 V reflects={r.reflected}, monotone={r.monotone}")
    assert ok


def test_criterion_11_species_timing(criterion):
    sc = preset_scenario("fig1").with_value("source.phase_policy", "swept")
    stats = {}
    for sp in ("Ca40", "N14"):
        recs = bl.run_ensemble(sc.with_value("source.species", [sp]).beamline(), 100, sc.seed, "swept", WORKERS)
        t = [float(i.states["target"][0]) for r in recs for i in r.hits()]
        stats[sp] = (bl.hit_speeds(recs).mean(), np.mean(t))
    ratio = stats["N14"][0] / stats["Ca40"][0]
    dt = stats["Ca40"][1] - stats["N14"][1]
    ok = bool(_within(ratio, math.sqrt(40 / 14), 0.05) and _within(dt, 4.3e-6, 0.10))
    criterion(11, ok, f"speeds {stats['N14'][0]:.0f}/{stats['Ca40'][0]:.0f} m/s, ratio {ratio:.4f} "
                       f"(sqrt(40/14) = {math.sqrt(40 / 14):.4f}), arrival separation {dt * 1e6:.3f} us")
    assert ok


def test_criterion_12_two_ion_crystal(criterion):
    omega = TWO_PI * 280e3
    pos = chain_equilibrium(2, omega, CA40)
    spacing = float(abs(pos[1] - pos[0]))
    analytic = (2 * COULOMB_K * E_CHARGE**2 / (CA40.mass_kg * omega**2)) ** (1 / 3)
    sc = preset_scenario("fig11a")
    recs = bl.run_ensemble(sc.beamline(), sc.data["run"]["n_shots"], sc.seed, sc.phase_policy, WORKERS)
    split = []
    for r in recs:
        t = sorted(float(i.states["target"][0]) for i in r.hits())
        if len(t) == 2:
            split.append(t[1] - t[0])
    s = float(np.mean(split))
    ok_space = _within(spacing, analytic, 0.01) and _within(spacing, 13.1e-6, 0.01)
    ok_split = _within(s, 26e-9, 0.5)
    ok = bool(ok_space and ok_split)
    criterion(12, ok, f"spacing {spacing * 1e6:.3f} um (closed form {analytic * 1e6:.3f} um); "
                       f"splitting {s * 1e9:.1f} ns over {len(split)} shots")
    assert ok


def test_criterion_13_transmission(criterion):
    sc = preset_scenario("fig13b")
    recs = bl.run_ensemble(sc.beamline(), sc.data["run"]["n_shots"], sc.seed, sc.phase_policy, WORKERS)
    s = cli.ensemble_summary(sc, recs, None)
    t = s["transmission"]
    c = np.array(s["spot"]["centroid_m"])
    ok = bool(abs(t["probability"] - 0.65) <= 0.10)
    criterion(13, ok, f"transmission {t['probability']:.3f} [{t['low']:.3f}, {t['high']:.3f}], "
                       f"centroid ({c[0] * 1e3:.2f}, {c[1] * 1e3:.2f}) mm, r68 {s['spot']['r68_m'] * 1e6:.1f} um")
    assert ok


def test_criterion_14_determinism(criterion, tmp_path):
    sc = preset_scenario("fig11a").with_value("run.n_shots", 24)
    path = tmp_path / "scenario.json"
    path.write_text(sc.to_text())
    digests = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        code = cli.main(["run", "--scenario", str(path), "--workers", str(w), "--out", str(out), "--seed", "11"])
        assert code == cli.EXIT_OK
        digests.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    same = digests[0] == digests[1] and len(digests[0]) >= 2
    criterion(14, same, f"{len(digests[0])} CSV files identical across 1 and 2 workers: {same}")
    assert same


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
