"""Command-line front end.

Subcommands: ``solve``, ``run``, ``sweep``, ``optimize``, ``preset``, ``report``.
Every flag can also be given through an environment variable with the
``IONSRC_`` prefix (``IONSRC_SCENARIO``, ``IONSRC_OUT``, ``IONSRC_SEED``,
``IONSRC_WORKERS``, ``IONSRC_CACHE``); explicit flags win.

Exit codes: 0 success, 2 scenario/schema or usage error, 3 solver or
simulation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import beamline as bl
from . import optimize as opt
from .diagnostics import (DetectionModel, InsufficientDataError, r68, spot_scale, tof_histogram, transmission,
                          velocity_stats, write_histogram_csv, write_spot_csv, write_spot_svg)
from .fields.bem import on_axis_profile
from .geometry import Aperture, LensParams
from .scenario import PRESETS, Scenario, ScenarioError, parse_scenario, preset

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_SOLVER = 3
ENV_PREFIX = "IONSRC_"

log = logging.getLogger("ionsource")


@dataclass
class RunReport:
    summary: dict
    files: dict = field(default_factory=dict)  # file name -> sha256

    @property
    def scenario_hash(self) -> str:
        return self.summary["scenario_hash"]

    @property
    def seed(self) -> int:
        return self.summary["seed"]


def versions() -> dict:
    import numba
    import scipy

    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:  # not installed as a distribution
        pkg = "unknown"
    return {"ionsource": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _f(x):
    """JSON-safe float (NaN and inf become null)."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# ensemble diagnostics


def _focal_range(sc: Scenario, rng) -> Optional[tuple]:
    return tuple(rng) if rng is not None else None


def _arrival_splitting(records) -> Optional[float]:
    d = []
    for r in records:
        t = sorted(float(i.states["target"][0]) for i in r.hits())
        if len(t) >= 2:
            d.append(t[1] - t[0])
    return float(np.mean(d)) if d else None


def ensemble_summary(sc: Scenario, records, out: Optional[Path]) -> dict:
    """Diagnostics of one ensemble; writes the configured CSV/SVG outputs into ``out``."""
    run = sc.data["run"]
    beam = sc.beamline()
    counts = {o.value: 0 for o in bl.Outcome}
    for r in records:
        for ion in r.ions:
            counts[ion.outcome.value] += 1
    s: dict = {"n_shots": len(records), "outcomes": counts}

    focal = None
    fr = _focal_range(sc, run["focal_range_m"])
    if fr is not None:
        try:
            focal = bl.find_focal_plane(records, fr)
            s["focal"] = {"z_m": focal.z, "r68_m": focal.r68, "at_boundary": focal.at_boundary}
        except ValueError as exc:
            s["focal"] = {"error": str(exc)}
    plane = run["spot_plane_z_m"]
    if plane is None and focal is not None:
        plane = focal.z
    spot = bl.spot_at(records, plane)
    s["spot_plane_z_m"] = _f(plane if plane is not None else beam.target_z)
    s["n_hits"] = len(spot)
    if len(spot) >= 3:
        rr = r68(spot)
        maj, mnr, ang = spot.principal_extents()
        s["spot"] = {"r68_m": rr, "centroid_m": spot.centroid.tolist(),
                     "sigma_major_m": maj, "sigma_minor_m": mnr, "major_angle_rad": ang,
                     "divergence_rad": 2.0 * rr / s["spot_plane_z_m"]}
    speeds = bl.hit_speeds(records)
    vs = velocity_stats(speeds)
    s["velocity"] = {"mean_mps": _f(vs.mean), "spread_mps": _f(vs.spread), "relative": _f(vs.relative)}
    per_species = {}
    for name in sorted(set(sc.data["source"]["species"])):
        v = bl.hit_speeds(records, name)
        if len(v):
            per_species[name] = _f(v.mean())
    if len(per_species) > 1:
        s["velocity"]["mean_by_species_mps"] = per_species

    times, idx = [], []
    for r in records:
        for ion in r.hits():
            times.append(float(ion.states["target"][0]))
            idx.append(ion.ion_id)
    hist = tof_histogram(times, run["tof_bin_s"], idx if times else None)
    s["tof"] = {"plane_z_m": beam.target_z, "bin_s": run["tof_bin_s"], "mean_s": _f(hist.mean),
                "sigma_s": _f(hist.sigma), "gauss_sigma_s": _f(hist.gauss_sigma),
                "mean_by_ion_s": {str(k): _f(v[1]) for k, v in hist.per_ion.items()}}
    split = _arrival_splitting(records)
    if split is not None:
        s["tof"]["arrival_splitting_s"] = split

    ta = run["transmission_aperture"]
    if ta is not None and len(spot):
        scaled = spot_scale(spot, run["spot_scale"])
        centre = tuple(ta["center_m"]) if ta["center_m"] is not None else tuple(spot.centroid)
        ap = Aperture(ta["diameter_m"], s["spot_plane_z_m"], centre)
        n_launched = sum(len(r.ions) for r in records)
        t = transmission(scaled, ap, DetectionModel(run["detection_efficiency"]), max(10000, 10 * n_launched),
                         sc.seed, n_launched)
        s["transmission"] = {"probability": t.probability, "low": t.low, "high": t.high,
                             "spot_scale": run["spot_scale"], "aperture_center_m": list(centre)}

    if out is not None:
        outputs = set(run["outputs"])
        if "spots" in outputs:
            rows = []
            for r in records:
                for ion in r.ions:
                    if ion.outcome == bl.Outcome.HIT:
                        st = ion.states["target"] if plane is None else bl._ballistic_row(ion.free_state(), plane)
                        rows.append((r.shot_id, ion.ion_id, st[1], st[2], st[0],
                                     float(np.linalg.norm(st[4:7])), ion.outcome.value))
                    else:
                        rows.append((r.shot_id, ion.ion_id, math.nan, math.nan, math.nan, math.nan,
                                     ion.outcome.value))
            write_spot_csv(out / "spots.csv", rows)
        if "tof" in outputs:
            write_histogram_csv(out / "tof.csv", hist)
        if "spot_svg" in outputs and len(spot):
            write_spot_svg(out / "spot.svg", spot, unit=1e-9 if focal is not None else 1e-6)
    return s


# ---------------------------------------------------------------------------
# studies


def _study_aperture(d, plane):
    if d is None:
        return None
    return Aperture(d["diameter_m"], plane if plane is not None else 0.0,
                    tuple(d["center_m"]) if d["center_m"] is not None else (0.0, 0.0))


def _write_rows(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i, r in enumerate(rows):
            cells = [str(i)]
            for v in r:
                cells.append(v if isinstance(v, str) else (str(v) if isinstance(v, (bool, int, np.integer))
                                                            else f"{float(v):.15e}"))
            fh.write(",".join(cells) + "\n")


def run_study(sc: Scenario, out: Optional[Path], workers: int = 1, cache_dir=None, only: Optional[str] = None):
    st = sc.study
    if st is None:
        if only:
            raise ScenarioError([f"study: scenario has no study section (needed for '{only}')"])
        return None
    kind = st["kind"]
    if only and kind != only:
        raise ScenarioError([f"study.kind: is '{kind}', expected '{only}'"])
    seed = st["seed"] if st.get("seed") is not None else sc.seed
    beam = sc.beamline()
    trace = out / "trace.csv" if out is not None else None
    res: dict = {"kind": kind}

    if kind == "sweep":
        spec = opt.SweepSpec(st["parameter"], tuple(st["values"]), st["metric"], st["plane_z_m"],
                             _focal_range(sc, st["focal_range_m"]), st["n_shots"], seed,
                             _study_aperture(st["aperture"], st["plane_z_m"] or beam.target_z),
                             DetectionModel(sc.data["run"]["detection_efficiency"]))
        pts = opt.sweep(sc, spec, workers, cache_dir)
        res["points"] = [{"value": p.value, "metric": _f(p.metric), "uncertainty": _f(p.uncertainty)} for p in pts]
        if trace:
            opt.write_trace_csv(trace, [st["parameter"]], pts)
    elif kind == "optimize":
        bounds = tuple(opt.ParameterBound(p["path"], p["lower"], p["upper"]) for p in st["parameters"])
        spec = opt.OptimizeSpec(bounds, st["metric"], st["budget"], seed, st["n_shots"], st["plane_z_m"],
                                _focal_range(sc, st["focal_range_m"]),
                                tuple(st["start"]) if st["start"] is not None else None,
                                aperture=_study_aperture(st["aperture"], st["plane_z_m"] or beam.target_z),
                                detection=DetectionModel(sc.data["run"]["detection_efficiency"]),
                                probes=st["probes"] or 0)
        r = opt.minimize(sc, spec, workers, cache_dir)
        res.update({"best_params": r.best_params, "best_metric": _f(r.best_metric),
                    "best_uncertainty": _f(r.best_uncertainty), "budget_exhausted": r.budget_exhausted,
                    "n_evaluations": r.n_evaluations})
        if trace:
            opt.write_trace_csv(trace, [b.path for b in bounds], r.trace)
    elif kind == "deflection_scan":
        plane = st["plane_z_m"] or beam.target_z
        ap = _study_aperture(st["aperture"], plane)
        m = opt.deflection_scan(sc, st["u1_grid_v"], st["u2_grid_v"], ap,
                                DetectionModel(sc.data["run"]["detection_efficiency"]), st["n_shots"], seed,
                                workers, cache_dir, st["plane_z_m"])
        res["map"] = m.tolist()
        if trace:
            rows = [(u1, u2, m[i, j]) for i, u1 in enumerate(st["u1_grid_v"]) for j, u2 in enumerate(st["u2_grid_v"])]
            _write_rows(trace, ["eval_index", "u1_v", "u2_v", "transmission"], rows)
    elif kind in ("start_position", "phase"):
        if kind == "phase":
            pts = bl.phase_study(beam, st["phases_rad"], st["n_shots"], seed, workers, cache_dir)
            col = "phase_rad"
        else:
            pts = bl.start_position_study(beam, st["offsets_m"], st["n_shots"], seed, st["axis"], workers,
                                          cache_dir, st["mode"])
            col = "offset_m"
        res["points"] = [{col: p.value, "mean_speed_mps": _f(p.mean_speed), "speed_spread_mps": _f(p.speed_spread),
                          "r68_m": _f(p.r68), "n_hits": p.n_hits} for p in pts]
        if trace:
            _write_rows(trace, ["eval_index", col, "mean_speed_mps", "speed_spread_mps", "r68_m", "n_hits"],
                        [(p.value, p.mean_speed, p.speed_spread, p.r68, p.n_hits) for p in pts])
    elif kind == "reflection":
        if beam.lens is None:
            raise ScenarioError(["study: reflection needs geometry.lens"])
        r = bl.classify_reflection(beam, st["species"], None, tuple(st["bracket_v"]), st["tol_v"], cache_dir)
        res.update({"species": st["species"], "lens_v": beam.lens.voltage, "reflected": r.reflected,
                    "passes": r.passes, "threshold_v": r.threshold, "monotone": r.monotone})
        if trace:
            _write_rows(trace, ["eval_index", "voltage_v", "reflected"], [(v, bool(x)) for v, x in r.trace])
    elif kind == "misalignment":
        if beam.lens is None:
            raise ScenarioError(["study: misalignment needs geometry.lens"])
        pts = bl.misalignment_study(beam, st["offsets_m"], st["plane_z_m"], st["n_shots"], seed, workers, cache_dir)
        res["points"] = [{"offset_m": o, "r68_m": _f(r), "centroid_m": c.tolist()} for o, r, c in pts]
        if trace:
            _write_rows(trace, ["eval_index", "offset_m", "r68_m"], [(o, r) for o, r, _ in pts])
    elif kind == "post_accelerate":
        if beam.tube is None:
            raise ScenarioError(["study: post_accelerate needs geometry.tube"])
        r = bl.post_accelerate(beam, st["n_shots"], seed, _focal_range(sc, st["focal_range_m"]), cache_dir)
        foc = r["focal"]
        res.update({"mean_speed_mps": _f(r["mean_speed"]),
                    "focal": None if foc is None else {"z_m": foc.z, "r68_m": foc.r68}})
    elif kind == "lens_table":
        res["rows"] = _lens_table(sc, st, seed, workers, cache_dir)
        if trace:
            _write_rows(trace, ["eval_index", "design", "mode", "temperature_k", "lens_v", "focal_z_m", "r68_m"],
                        [(r["design"], r["mode"], r["temperature_k"], r["lens_v"], r["focal_z_m"] or math.nan,
                          r["r68_m"] or math.nan) for r in res["rows"]])
    return res


def _lens_table(sc: Scenario, st: dict, seed: int, workers: int, cache_dir) -> list:
    rows = []
    for design in st["designs"]:
        lens = dict(sc.data["geometry"]["lens"] or {})
        lens.update(design=design, aperture_diameter_m=None, gap_12_m=None, gap_23_m=None,
                    electrode_thicknesses_m=None)
        z_exit = LensParams(design=design, axial_position=lens.get("axial_position_m", 0.240)).z_exit
        fr = (z_exit - 1e-3, z_exit + 0.2)
        base = sc.with_value("geometry.lens", lens).with_value("voltages.lens_switch", None)
        for mode in st["modes"]:
            for T in st["temperatures_k"]:
                s2 = base.with_value("source.temperature_k", float(T))
                spec = opt.OptimizeSpec((opt.ParameterBound("voltages.lens_v", mode["lower_v"], mode["upper_v"]),),
                                        "focal_r68", st["budget"], seed, st["n_shots"], focal_range=fr)
                r = opt.minimize(s2, spec, workers, cache_dir)
                v = r.best_params["voltages.lens_v"]
                recs = bl.run_ensemble(s2.with_value("voltages.lens_v", v).beamline(), st["n_shots"], seed,
                                       s2.phase_policy, workers, cache_dir)
                try:
                    foc = bl.find_focal_plane(recs, fr)
                    fz, fr68 = foc.z, foc.r68
                except ValueError:
                    fz = fr68 = None
                rows.append({"design": design, "mode": mode["name"], "temperature_k": float(T), "lens_v": v,
                             "focal_z_m": _f(fz), "focal_past_exit_m": _f(fz - z_exit) if fz is not None else None,
                             "r68_m": _f(fr68)})
    return rows


# ---------------------------------------------------------------------------
# top-level operations


def run(scenario: Scenario, output_dir, workers: int = 1, cache_dir=None, mode: str = "run") -> RunReport:
    """Ensemble, diagnostics and study of a scenario; writes outputs into ``output_dir``.

    ``mode`` "sweep" or "optimize" skips the base ensemble and requires a
    study of that kind.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"scenario_hash": scenario.hash, "seed": scenario.seed, "versions": versions(),
                     "mode": mode}
    (out / "scenario.json").write_text(scenario.to_text())
    if mode == "run":
        beam = scenario.beamline()
        recs = bl.run_ensemble(beam, scenario.data["run"]["n_shots"], scenario.seed, scenario.phase_policy,
                               workers, cache_dir)
        summary["ensemble"] = ensemble_summary(scenario, recs, out)
        summary["study"] = run_study(scenario, out, workers, cache_dir)
    else:
        summary["study"] = run_study(scenario, out, workers, cache_dir, only=mode)
    files = {}
    for name in ("scenario.json", "spots.csv", "tof.csv", "trace.csv", "spot.svg"):
        p = out / name
        if p.exists():
            files[name] = _sha256(p)
    summary["files"] = files
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunReport(summary, files)


def solve(scenario: Scenario, cache_dir=None) -> dict:
    """Solve (or load cached) field bases and report trap and lens properties."""
    beam = scenario.beamline()
    p = bl.prepare(beam, cache_dir)
    info: dict = {"scenario_hash": scenario.hash}
    if beam.synthetic is None:
        b = p.trap_basis
        info["trap"] = {"panels": len(b.mesh), "electrodes": len(b.names), "condition": b.condition,
                        "minimum_m": p.centre.tolist(),
                        "secular_hz": (np.asarray(p.omegas) / (2 * math.pi)).tolist()}
    if beam.lens is not None:
        L = beam.lens
        lp = L.params
        prof = on_axis_profile(p.lens_basis, {"L1": L.outer_voltage, "L2": L.voltage, "L3": L.outer_voltage},
                               (lp.z_entry - 2e-3, lp.z_exit + 2e-3), 801)
        info["lens"] = {"panels": len(p.lens_basis.mesh), "condition": p.lens_basis.condition,
                        "z_entry_m": lp.z_entry, "z_exit_m": lp.z_exit,
                        "axis_peak_v": prof.peak, "axis_peak_z_m": prof.peak_z}
    if beam.tube is not None:
        info["tube"] = {"panels": len(p.tube_basis.mesh), "condition": p.tube_basis.condition}
    return info


def format_report(summary: dict) -> str:
    lines = [f"scenario {summary['scenario_hash']}  seed {summary['seed']}  mode {summary.get('mode', 'run')}"]
    e = summary.get("ensemble")
    if e:
        lines.append(f"shots {e['n_shots']}  hits {e['n_hits']}  outcomes {e['outcomes']}")
        v = e["velocity"]
        if v["mean_mps"] is not None:
            lines.append(f"speed {v['mean_mps']:.1f} m/s  spread {v['spread_mps'] or 0:.3g} m/s  "
                         f"dv/v {v['relative'] or 0:.3g}")
        if "spot" in e:
            sp = e["spot"]
            lines.append(f"r68 {sp['r68_m']:.4g} m at z = {e['spot_plane_z_m']:.6g} m  "
                         f"divergence {sp['divergence_rad']:.4g} rad")
        if "focal" in e and "z_m" in e["focal"]:
            lines.append(f"focal plane z = {e['focal']['z_m']:.6g} m  r68 {e['focal']['r68_m']:.4g} m")
        t = e["tof"]
        if t["mean_s"] is not None:
            lines.append(f"tof mean {t['mean_s']:.6g} s  sigma {t['sigma_s'] or 0:.3g} s")
        if "arrival_splitting_s" in t:
            lines.append(f"two-ion arrival splitting {t['arrival_splitting_s']:.4g} s")
        if "transmission" in e:
            tr = e["transmission"]
            lines.append(f"transmission {tr['probability']:.3f} [{tr['low']:.3f}, {tr['high']:.3f}]")
    st = summary.get("study")
    if st:
        lines.append(f"study {st['kind']}:")
        for k, v in st.items():
            if k == "kind":
                continue
            if isinstance(v, list):
                for row in v:
                    lines.append(f"  {row}")
            else:
                lines.append(f"  {k}: {v}")
    files = summary.get("files", {})
    if files:
        lines.append("files: " + ", ".join(sorted(files)))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument handling


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ionsource", description="Deterministic single-ion source simulator.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--scenario", default=_env("SCENARIO"), help="scenario JSON file")
        p.add_argument("--seed", type=int, default=_env("SEED"), help="override source.seed")
        p.add_argument("--workers", type=int, default=int(_env("WORKERS", 1)), help="worker processes")
        p.add_argument("--cache", default=_env("CACHE"), help="field cache directory")
        if out:
            p.add_argument("--out", default=_env("OUT"), help="output directory")

    common(sub.add_parser("solve", help="solve or load field bases and print trap/lens properties"), out=False)
    common(sub.add_parser("run", help="ensemble, diagnostics and study"))
    common(sub.add_parser("sweep", help="run the scenario's sweep study"))
    common(sub.add_parser("optimize", help="run the scenario's optimize study"))
    p = sub.add_parser("preset", help="print a named preset scenario")
    p.add_argument("name", nargs="?", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--out", default=None, help="write to this file instead of stdout")
    p.add_argument("--list", action="store_true", help="list presets")
    p = sub.add_parser("report", help="print the summary of a finished run")
    p.add_argument("--out", default=_env("OUT"), help="output directory of the run")
    return ap


def _load(args) -> Scenario:
    if not args.scenario:
        raise ScenarioError(["--scenario (or IONSRC_SCENARIO) is required"])
    try:
        text = Path(args.scenario).read_text()
    except OSError as exc:
        raise ScenarioError([f"cannot read scenario: {exc}"]) from None
    sc = parse_scenario(text)
    if args.seed is not None:
        seed = int(args.seed)
        if seed < 0 or seed >= 2 ** 64:
            raise ScenarioError(["--seed must be an unsigned 64-bit integer"])
        sc = sc.with_value("source.seed", seed)
    return sc


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_SCHEMA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "preset":
            if args.list or not args.name:
                for k, d in PRESETS.items():
                    print(f"{k:12s} {d}")
                return EXIT_OK if args.list else EXIT_SCHEMA
            try:
                text = preset(args.name)
            except KeyError as exc:
                raise ScenarioError([str(exc.args[0])]) from None
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        if args.command == "report":
            if not args.out:
                raise ScenarioError(["--out (or IONSRC_OUT) is required"])
            summary = json.loads((Path(args.out) / "summary.json").read_text())
            print(format_report(summary))
            return EXIT_OK
        sc = _load(args)
        if args.command == "solve":
            print(json.dumps(solve(sc, args.cache), indent=2))
            return EXIT_OK
        if not args.out:
            raise ScenarioError(["--out (or IONSRC_OUT) is required"])
        report = run(sc, args.out, max(1, args.workers), args.cache, mode=args.command)
        print(format_report(report.summary))
        return EXIT_OK
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (RuntimeError, ValueError, ArithmeticError, InsufficientDataError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
