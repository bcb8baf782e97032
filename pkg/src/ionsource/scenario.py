"""Scenario files: schema, validation, canonical serialization and presets.

A scenario is a JSON document with the sections ``geometry``, ``voltages``,
``source``, ``run`` and an optional ``study``. Every dimensional key carries
its unit as a suffix (``_m``, ``_v``, ``_s``, ``_k``, ``_hz``, ``_rad``,
``_mps``). Missing keys take defaults, so the canonical form of a scenario is
fully explicit; its SHA-256 is the scenario hash written to run summaries.
"""

from __future__ import annotations

import copy
import dataclasses
import difflib
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Optional

from . import beamline as bl
from .dynamics.program import ElectrodeProgram, RfTerm, SwitchEvent
from .dynamics.species import SPECIES
from .geometry import Aperture, GeometryError, LensDesign, LensParams, TrapParams, TubeParams

UNIT_SUFFIXES = ("m", "v", "s", "k", "hz", "rad", "mps")
REQUIRED_SECTIONS = ("geometry", "voltages", "source", "run")
SECTIONS = REQUIRED_SECTIONS + ("study",)


class ScenarioError(ValueError):
    """Schema violations; ``errors`` holds one message per offending key path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# schema description


@dataclass(frozen=True)
class Field:
    kind: str  # float int bool str floats ints strs floatmap section sections sectionmap
    default: Any = None
    nullable: bool = False
    length: Optional[int] = None
    choices: Optional[tuple] = None
    schema: Optional[dict] = None
    minimum: Optional[float] = None


def _num(default, nullable=False, minimum=None):
    return Field("float", default, nullable, minimum=minimum)


def _int(default, nullable=False, minimum=None):
    return Field("int", default, nullable, minimum=minimum)


def _vec(default, length=None, nullable=False, kind="floats"):
    return Field(kind, default, nullable, length=length)


def _sec(schema, nullable=False):
    return Field("section", None, nullable, schema=schema)


_TP = TrapParams()
_TRAP = {
    "blade_thickness_m": _num(_TP.blade_thickness),
    "blade_length_m": _num(_TP.blade_length),
    "blade_separation_m": _num(_TP.blade_separation),
    "segment_width_m": _num(_TP.segment_width),
    "segment_count": _int(_TP.segment_count),
    "segment_gap_m": _num(_TP.segment_gap),
    "blade_depth_m": _num(_TP.blade_depth),
    "rail_width_m": _num(_TP.rail_width),
    "rail_gap_m": _num(_TP.rail_gap),
    "deflection_electrode": Field("bool", _TP.deflection_electrode),
    "deflection_width_m": _num(_TP.deflection_width),
    "rf_rail": Field("bool", _TP.rf_rail),
    "ion_segment": _int(None, nullable=True, minimum=1),
}


def _mesh(m: bl.MeshSettings):
    return {
        "target_panel_size_m": _num(m.target_panel_size, minimum=0.0),
        "gap_refinement": _num(m.gap_refinement, minimum=1.0),
        "grading": _num(m.grading, minimum=0.0),
    }


_LENS = {
    "design": Field("str", LensDesign.CUSTOM_ASYMMETRIC.value, choices=tuple(d.value for d in LensDesign)),
    "aperture_diameter_m": _num(None, nullable=True),
    "gap_12_m": _num(None, nullable=True),
    "gap_23_m": _num(None, nullable=True),
    "electrode_thicknesses_m": _vec(None, 3, nullable=True),
    "axial_position_m": _num(LensParams().axial_position),
    "outer_radius_m": _num(LensParams().outer_radius),
    "region_margin_m": _num(bl.LensElement().region_margin, minimum=0.0),
}

_TUBE = {
    "inner_radius_m": _num(TubeParams().inner_radius),
    "wall_m": _num(TubeParams().wall),
    "length_m": _num(TubeParams().length),
    "axial_position_m": _num(TubeParams().axial_position),
}

_APERTURE = {
    "diameter_m": _num(None),
    "plane_z_m": _num(None),
    "center_m": _vec([0.0, 0.0], 2),
}

_GEOMETRY = {
    "trap": _sec(_TRAP),
    "trap_mesh": _sec(_mesh(bl.TRAP_MESH)),
    "lens": _sec(_LENS, nullable=True),
    "lens_mesh": _sec(_mesh(bl.LENS_MESH)),
    "tube": _sec(_TUBE, nullable=True),
    "tube_mesh": _sec(_mesh(bl.TUBE_MESH)),
    "apertures": Field("sections", [], schema=_APERTURE),
    "target_z_m": _num(0.247),
    "handoff_z_m": _num(bl.TrapSource().handoff_z),
}

_EVENT = {
    "time_s": _num(None),
    "target_v": _num(None),
    "rise_s": _num(5e-9, minimum=0.0),
    "jittered": Field("bool", True),
}

_ELECTRODE = {
    "dc_v": _num(0.0),
    "rf_amplitude_v": _num(0.0),
    "rf_phase_rad": _num(0.0),
    "events": Field("sections", [], schema=_EVENT),
}

_SWITCH = {
    "v1_v": _num(None),
    "v2_v": _num(None),
    "delay_s": _num(None),
    "rise_s": _num(5e-9, minimum=0.0),
}

_TS = bl.TrapSource()
_VOLTAGES = {
    "rf_amplitude_v": _num(_TS.rf_amplitude),
    "rf_frequency_hz": _num(_TS.rf_omega / (2 * math.pi), minimum=0.0),
    "dc_segments": _vec(list(_TS.dc_segments), kind="ints"),
    "dc_v": _num(_TS.dc_voltage),
    "extraction_segments": _vec(list(_TS.extraction_segments), kind="ints"),
    "extraction_v": _num(_TS.extraction_voltage),
    "extraction_rise_s": _num(_TS.rise_time, minimum=0.0),
    "trigger_delay_s": _num(_TS.trigger_delay),
    "jitter_sigma_s": _num(_TS.jitter_sigma, minimum=0.0),
    "extract": Field("bool", True),
    "deflection_v": _vec([0.0, 0.0], 2),
    "compensation_v": Field("floatmap", {}),
    "electrodes": Field("sectionmap", {}, schema=_ELECTRODE),
    "lens_v": _num(bl.LensElement().voltage),
    "lens_outer_v": _num(0.0),
    "lens_switch": _sec(_SWITCH, nullable=True),
    "tube_v": _num(bl.TubeElement().voltage),
    "tube_switch_delay_s": _num(0.0, nullable=True),
    "tube_rise_s": _num(5e-9, minimum=0.0),
}

_SYNTHETIC = {
    "speed_mps": _num(None, minimum=0.0),
    "speed_sigma_mps": _num(0.0, minimum=0.0),
    "r68_m": _num(None, minimum=0.0),
    "reference_z_m": _num(0.247),
    "species": Field("str", "Ca40", choices=tuple(SPECIES)),
}

_SOURCE = {
    "species": Field("strs", ["Ca40"], choices=tuple(SPECIES)),
    "temperature_k": _num(2e-3, minimum=0.0),
    "offset_m": _vec([0.0, 0.0, 0.0], 3),
    "orbit_m": _vec([0.0, 0.0, 0.0], 3),
    "rf_phase_rad": _num(bl.OPTIMAL_PHASE),
    "phase_policy": Field("str", "fixed", choices=tuple(p.value for p in bl.PhasePolicy)),
    "seed": _int(0, minimum=0),
    "synthetic": _sec(_SYNTHETIC, nullable=True),
}

OUTPUTS = ("spots", "tof", "spot_svg")

_TRANSMISSION = {
    "diameter_m": _num(None),
    "center_m": _vec(None, 2, nullable=True),  # null: centred on the spot centroid
}

_RUN = {
    "n_shots": _int(300, minimum=1),
    "outputs": Field("strs", list(OUTPUTS), choices=OUTPUTS),
    "tof_bin_s": _num(10e-9, minimum=0.0),
    "spot_plane_z_m": _num(None, nullable=True),
    "focal_range_m": _vec(None, 2, nullable=True),
    "spot_scale": _num(1.0, minimum=0.0),
    "detection_efficiency": _num(1.0, minimum=0.0),
    "transmission_aperture": _sec(_TRANSMISSION, nullable=True),
}

_BOUND = {"path": Field("str", None), "lower": _num(None), "upper": _num(None)}
_MODE = {"name": Field("str", None), "lower_v": _num(None), "upper_v": _num(None)}

STUDY_KINDS = ("sweep", "optimize", "deflection_scan", "start_position", "phase", "reflection",
               "misalignment", "post_accelerate", "lens_table")

# Unit-less keys here take the unit of the scenario key they refer to
# (``values``, ``start``, ``lower``, ``upper``) or are dimensionless.
_STUDY = {
    "kind": Field("str", None, choices=STUDY_KINDS),
    "n_shots": _int(None, nullable=True, minimum=1),
    "seed": _int(None, nullable=True, minimum=0),
    "parameter": Field("str", None, nullable=True),
    "values": _vec(None, nullable=True),
    "metric": Field("str", None, nullable=True, choices=("r68_at_plane", "focal_r68", "mean_speed",
                                                         "speed_spread", "transmission")),
    "plane_z_m": _num(None, nullable=True),
    "focal_range_m": _vec(None, 2, nullable=True),
    "parameters": Field("sections", None, nullable=True, schema=_BOUND),
    "budget": _int(None, nullable=True, minimum=1),
    "start": _vec(None, nullable=True),
    "probes": _int(None, nullable=True, minimum=0),
    "u1_grid_v": _vec(None, nullable=True),
    "u2_grid_v": _vec(None, nullable=True),
    "aperture": _sec(_TRANSMISSION, nullable=True),
    "offsets_m": _vec(None, nullable=True),
    "axis": _int(None, nullable=True, minimum=0),
    "mode": Field("str", None, nullable=True, choices=("orbit", "static")),
    "phases_rad": _vec(None, nullable=True),
    "species": Field("str", None, nullable=True, choices=tuple(SPECIES)),
    "bracket_v": _vec(None, 2, nullable=True),
    "tol_v": _num(None, nullable=True, minimum=0.0),
    "designs": Field("strs", None, nullable=True, choices=tuple(d.value for d in LensDesign)),
    "modes": Field("sections", None, nullable=True, schema=_MODE),
    "temperatures_k": _vec(None, nullable=True),
}

# kind -> (required keys, optional keys with defaults)
_KIND_KEYS = {
    "sweep": (("parameter", "values", "metric"),
              {"n_shots": 200, "seed": None, "plane_z_m": None, "focal_range_m": None, "aperture": None}),
    "optimize": (("parameters", "metric"),
                 {"budget": 40, "start": None, "probes": 0, "n_shots": 200, "seed": None, "plane_z_m": None,
                  "focal_range_m": None, "aperture": None}),
    "deflection_scan": (("u1_grid_v", "u2_grid_v", "aperture"), {"n_shots": 100, "seed": None, "plane_z_m": None}),
    "start_position": (("offsets_m",), {"axis": 2, "mode": "orbit", "n_shots": 100, "seed": None}),
    "phase": (("phases_rad",), {"n_shots": 100, "seed": None}),
    "reflection": ((), {"species": "Ca40", "bracket_v": [0.0, 300.0], "tol_v": 0.05}),
    "misalignment": (("offsets_m", "plane_z_m"), {"n_shots": 100, "seed": None}),
    "post_accelerate": ((), {"n_shots": 50, "seed": None, "focal_range_m": None}),
    "lens_table": (("designs", "modes", "temperatures_k"),
                   {"budget": 12, "n_shots": 100, "seed": None}),
}

SCHEMA = {
    "geometry": _sec(_GEOMETRY),
    "voltages": _sec(_VOLTAGES),
    "source": _sec(_SOURCE),
    "run": _sec(_RUN),
    "study": _sec(_STUDY, nullable=True),
}


# ---------------------------------------------------------------------------
# validation


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _unknown_key_message(key: str, path: str, schema: dict) -> str:
    for cand in schema:
        head, _, unit = cand.rpartition("_")
        if head == key and unit in UNIT_SUFFIXES:
            return f"{path}: missing unit suffix; use '{cand}'"
    close = difflib.get_close_matches(key, list(schema), n=1)
    hint = f" (did you mean '{close[0]}'?)" if close else ""
    return f"{path}: unknown key{hint}"


def _check_value(f: Field, v, path: str, errors: list):
    if v is None:
        if f.nullable:
            return None
        errors.append(f"{path}: required value missing" if f.default is None else f"{path}: must not be null")
        return None
    k = f.kind
    if k == "float":
        if not _is_number(v) or not math.isfinite(v):
            errors.append(f"{path}: expected a finite number, got {v!r}")
            return None
        v = float(v)
    elif k == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            errors.append(f"{path}: expected an integer, got {v!r}")
            return None
    elif k == "bool":
        if not isinstance(v, bool):
            errors.append(f"{path}: expected true or false, got {v!r}")
            return None
    elif k == "str":
        if not isinstance(v, str):
            errors.append(f"{path}: expected a string, got {v!r}")
            return None
        if f.choices and v not in f.choices:
            errors.append(f"{path}: {v!r} not one of {list(f.choices)}")
            return None
    elif k in ("floats", "ints", "strs"):
        if not isinstance(v, list):
            errors.append(f"{path}: expected a list, got {v!r}")
            return None
        if f.length is not None and len(v) != f.length:
            errors.append(f"{path}: expected {f.length} entries, got {len(v)}")
            return None
        item = Field({"floats": "float", "ints": "int", "strs": "str"}[k], 0, choices=f.choices, minimum=f.minimum)
        out = [_check_value(item, x, f"{path}[{i}]", errors) for i, x in enumerate(v)]
        return out
    elif k == "floatmap":
        if not isinstance(v, dict):
            errors.append(f"{path}: expected an object of name -> number")
            return None
        out = {}
        for name, x in v.items():
            out[name] = _check_value(Field("float", 0), x, f"{path}.{name}", errors)
        return out
    elif k == "section":
        return _validate_section(v, f.schema, path, errors)
    elif k == "sections":
        if not isinstance(v, list):
            errors.append(f"{path}: expected a list of objects")
            return None
        return [_validate_section(x, f.schema, f"{path}[{i}]", errors) for i, x in enumerate(v)]
    elif k == "sectionmap":
        if not isinstance(v, dict):
            errors.append(f"{path}: expected an object of name -> object")
            return None
        return {name: _validate_section(x, f.schema, f"{path}.{name}", errors) for name, x in v.items()}
    if f.minimum is not None and _is_number(v) and v < f.minimum:
        errors.append(f"{path}: must be >= {f.minimum}, got {v!r}")
    return v


def _default(f: Field, path: str, errors: list):
    if f.kind == "section":
        return None if f.nullable else _validate_section({}, f.schema, path, errors)
    return copy.deepcopy(f.default)


def _validate_section(obj, schema: dict, path: str, errors: list) -> Optional[dict]:
    if not isinstance(obj, dict):
        errors.append(f"{path}: expected an object, got {type(obj).__name__}")
        return None
    for key in obj:
        if key not in schema:
            errors.append(_unknown_key_message(key, f"{path}.{key}", schema))
    out = {}
    for key, f in schema.items():
        p = f"{path}.{key}"
        if key in obj:
            out[key] = _check_value(f, obj[key], p, errors)
        else:
            if f.default is None and not f.nullable and f.kind not in ("section", "sections", "sectionmap"):
                errors.append(f"{p}: required key missing")
            out[key] = _default(f, p, errors)
    return out


def _validate_study(study: Optional[dict], raw: Optional[dict], errors: list) -> Optional[dict]:
    if study is None or study.get("kind") is None:
        return None
    kind = study["kind"]
    required, optional = _KIND_KEYS[kind]
    given = set(raw or {})
    out = {"kind": kind}
    for key in required:
        if study.get(key) is None:
            errors.append(f"study.{key}: required for kind '{kind}'")
        out[key] = study.get(key)
    for key, d in optional.items():
        out[key] = study[key] if key in given else copy.deepcopy(d)
    for key in given - set(required) - set(optional) - {"kind"}:
        if key in _STUDY:
            errors.append(f"study.{key}: not used by kind '{kind}'")
    if kind == "optimize" and out.get("parameters"):
        if out["budget"] < len(out["parameters"]) + 2:
            errors.append("study.budget: must be >= number of parameters + 2")
        elif (out["probes"] or 0) > out["budget"] - len(out["parameters"]) - 2:
            errors.append("study.probes: must leave at least number of parameters + 2 evaluations of the budget")
        for i, b in enumerate(out["parameters"]):
            if b and b["lower"] is not None and b["upper"] is not None and not b["lower"] < b["upper"]:
                errors.append(f"study.parameters[{i}]: lower must be < upper")
    return out


def validate(data) -> dict:
    """Canonical, fully populated scenario dict; raises ScenarioError."""
    errors: list = []
    if not isinstance(data, dict):
        raise ScenarioError([f"scenario: expected an object with sections {list(REQUIRED_SECTIONS)}"])
    missing = [s for s in REQUIRED_SECTIONS if s not in data]
    if missing:
        errors.append("scenario: missing required sections " + ", ".join(repr(s) for s in missing))
    for key in data:
        if key not in SCHEMA:
            errors.append(_unknown_key_message(key, key, SCHEMA))
    out = {}
    for name in REQUIRED_SECTIONS:
        out[name] = _validate_section(data.get(name, {}), SCHEMA[name].schema, name, errors)
    raw_study = data.get("study")
    if raw_study is not None:
        st = _validate_section(raw_study, _STUDY, "study", errors)
        out["study"] = _validate_study(st, raw_study, errors) if st is not None else None
    else:
        out["study"] = None
    if out["run"] is not None and out["run"]["detection_efficiency"] is not None \
            and out["run"]["detection_efficiency"] > 1.0:
        errors.append("run.detection_efficiency: must be <= 1")
    if errors:
        raise ScenarioError(errors)
    try:
        _build_beamline(out)
    except (GeometryError, ValueError, KeyError) as exc:
        raise ScenarioError([f"scenario: {exc}"]) from None
    return out


def parse_scenario(text: str) -> "Scenario":
    """Parse JSON scenario text into a validated Scenario."""
    if not text or not text.strip():
        raise ScenarioError(["scenario: empty document; required sections: " + ", ".join(REQUIRED_SECTIONS)])
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"scenario: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    return Scenario(validate(data))


# ---------------------------------------------------------------------------
# building runtime objects


def _mesh_settings(d) -> bl.MeshSettings:
    return bl.MeshSettings(d["target_panel_size_m"], d["gap_refinement"], d["grading"])


def _lens_params(d) -> LensParams:
    return LensParams(design=d["design"], aperture_diameter=d["aperture_diameter_m"], gap_12=d["gap_12_m"],
                      gap_23=d["gap_23_m"],
                      electrode_thicknesses=None if d["electrode_thicknesses_m"] is None
                      else tuple(d["electrode_thicknesses_m"]),
                      axial_position=d["axial_position_m"], outer_radius=d["outer_radius_m"])


def _electrode_override(d, omega) -> ElectrodeProgram:
    rf = RfTerm(d["rf_amplitude_v"], omega, d["rf_phase_rad"]) if d["rf_amplitude_v"] else None
    ev = tuple(SwitchEvent(e["time_s"], e["target_v"], e["rise_s"], jittered=e["jittered"]) for e in d["events"])
    return ElectrodeProgram(dc=d["dc_v"], rf=rf, events=ev)


def _build_beamline(d: dict) -> bl.Beamline:
    g, v, s = d["geometry"], d["voltages"], d["source"]
    t = g["trap"]
    params = TrapParams(**{k[:-2] if k.endswith("_m") else k: val for k, val in t.items()})
    omega = 2 * math.pi * v["rf_frequency_hz"]
    trap = bl.TrapSource(
        params=params, mesh=_mesh_settings(g["trap_mesh"]), rf_amplitude=v["rf_amplitude_v"], rf_omega=omega,
        dc_segments=tuple(v["dc_segments"]), dc_voltage=v["dc_v"],
        extraction_segments=tuple(v["extraction_segments"]), extraction_voltage=v["extraction_v"],
        rise_time=v["extraction_rise_s"], trigger_delay=v["trigger_delay_s"], jitter_sigma=v["jitter_sigma_s"],
        compensation=tuple(sorted(v["compensation_v"].items())), extract=v["extract"],
        overrides=tuple((n, _electrode_override(e, omega)) for n, e in sorted(v["electrodes"].items())),
        handoff_z=g["handoff_z_m"])
    lens = None
    if g["lens"] is not None:
        sw = v["lens_switch"]
        sched = None if sw is None else bl.SwitchSchedule(sw["v1_v"], sw["v2_v"], sw["delay_s"], sw["rise_s"])
        lens = bl.LensElement(params=_lens_params(g["lens"]), voltage=v["lens_v"], schedule=sched,
                              outer_voltage=v["lens_outer_v"], mesh=_mesh_settings(g["lens_mesh"]),
                              region_margin=g["lens"]["region_margin_m"])
    tube = None
    if g["tube"] is not None:
        tp = TubeParams(**{k[:-2]: val for k, val in g["tube"].items()})
        tube = bl.TubeElement(params=tp, voltage=v["tube_v"], switch_delay=v["tube_switch_delay_s"],
                              rise_time=v["tube_rise_s"], mesh=_mesh_settings(g["tube_mesh"]))
    syn = None
    if s["synthetic"] is not None:
        y = s["synthetic"]
        syn = bl.SyntheticBeam(y["speed_mps"], y["speed_sigma_mps"], y["r68_m"], y["reference_z_m"], y["species"])
    source = bl.SourceSettings(species=tuple(s["species"]), temperature=s["temperature_k"],
                               offset=tuple(s["offset_m"]), orbit=tuple(s["orbit_m"]),
                               rf_trigger_phase=s["rf_phase_rad"])
    if not s["species"]:
        raise ValueError("source.species must list at least one ion")
    aps = tuple(Aperture(a["diameter_m"], a["plane_z_m"], tuple(a["center_m"])) for a in g["apertures"])
    return bl.Beamline(trap=trap, source=source, deflection=tuple(v["deflection_v"]), lens=lens, tube=tube,
                       apertures=aps, target_z=g["target_z_m"], synthetic=syn)


# ---------------------------------------------------------------------------
# Scenario


def _split_path(path: str):
    parts = []
    for p in path.split("."):
        parts.append(int(p) if p.isdigit() else p)
    return parts


class Scenario:
    """Validated scenario. ``data`` is the canonical dict (do not mutate)."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def from_dict(cls, data) -> "Scenario":
        return cls(validate(data))

    def to_text(self) -> str:
        return json.dumps(self.data, indent=2) + "\n"

    @property
    def hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def get(self, path: str):
        node = self.data
        for p in _split_path(path):
            try:
                node = node[p]
            except (KeyError, IndexError, TypeError):
                raise KeyError(f"scenario path {path!r} does not resolve") from None
        return node

    def with_value(self, path: str, value) -> "Scenario":
        """Copy with the value at a dotted key path replaced (list entries by index)."""
        parts = _split_path(path)
        self.get(path)
        data = copy.deepcopy(self.data)
        node = data
        for p in parts[:-1]:
            node = node[p]
        if isinstance(value, tuple):
            value = list(value)
        node[parts[-1]] = value
        return Scenario(validate(data))

    def beamline(self) -> bl.Beamline:
        return _build_beamline(self.data)

    @property
    def phase_policy(self) -> bl.PhasePolicy:
        return bl.PhasePolicy(self.data["source"]["phase_policy"])

    @property
    def seed(self) -> int:
        return int(self.data["source"]["seed"])

    @property
    def study(self) -> Optional[dict]:
        return self.data.get("study")

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.data == other.data

    def __repr__(self):
        return f"Scenario({self.hash[:12]})"


def default_scenario() -> Scenario:
    return Scenario(validate({s: {} for s in REQUIRED_SECTIONS}))


# ---------------------------------------------------------------------------
# presets


def _lens_exit(lens: Optional[dict] = None) -> float:
    d = dict(_LENS_DEFAULTS_DICT)
    d.update(lens or {})
    return _lens_params(d).z_exit


_LENS_DEFAULTS_DICT = {k: copy.deepcopy(f.default) for k, f in _LENS.items()}


def _preset_data(name: str) -> dict:
    base = {s: {} for s in REQUIRED_SECTIONS}
    lens = {"design": "CustomAsymmetric"}
    z_exit = _lens_exit(lens)
    if name == "fig1":
        base["run"] = {"n_shots": 300}
    elif name == "fig2":
        base["run"] = {"n_shots": 100}
        base["study"] = {"kind": "start_position", "axis": 2, "mode": "orbit", "n_shots": 100,
                         "offsets_m": [-420e-6, -300e-6, -200e-6, -100e-6, 0.0, 100e-6, 200e-6, 300e-6, 420e-6]}
    elif name == "fig3":
        base["run"] = {"n_shots": 100}
        base["study"] = {"kind": "phase", "n_shots": 100,
                         "phases_rad": [2 * math.pi * k / 16 for k in range(16)]}
    elif name == "fig4_table":
        base["geometry"] = {"lens": lens}
        base["run"] = {"n_shots": 100}
        base["study"] = {"kind": "lens_table", "designs": [d.value for d in LensDesign],
                         "modes": [{"name": "decel_accel", "lower_v": 20.0, "upper_v": 120.0},
                                   {"name": "accel_decel", "lower_v": -400.0, "upper_v": -20.0}],
                         "temperatures_k": [2e-3, 1e-4], "budget": 12, "n_shots": 100}
    elif name == "fig6":
        base["geometry"] = {"lens": lens}
        base["voltages"] = {"lens_v": 65.0}
        base["run"] = {"n_shots": 300, "focal_range_m": [z_exit - 1e-3, z_exit + 20e-3]}
    elif name == "fig7a":
        base["geometry"] = {"lens": lens}
        base["run"] = {"n_shots": 200, "focal_range_m": [z_exit - 1e-3, z_exit + 0.2]}
        base["study"] = {"kind": "sweep", "parameter": "voltages.lens_v", "values": [25.0, 50.0, 65.0],
                         "metric": "focal_r68", "focal_range_m": [z_exit - 1e-3, z_exit + 0.2], "n_shots": 200}
    elif name == "fig7b":
        base["geometry"] = {"lens": lens}
        base["run"] = {"n_shots": 100}
        base["study"] = {"kind": "misalignment", "plane_z_m": z_exit + 0.5e-3, "n_shots": 100,
                         "offsets_m": [0.0, 50e-6, 100e-6, 150e-6, 200e-6, 250e-6]}
    elif name == "fig8":
        entry = LensParams().z_entry
        base["geometry"] = {"lens": lens}
        base["voltages"] = {"lens_switch": {"v1_v": 35.0, "v2_v": 85.0, "delay_s": 210e-9, "rise_s": 5e-9}}
        base["source"] = {"synthetic": {"speed_mps": 21856.0, "speed_sigma_mps": 0.0, "r68_m": 36e-6,
                                        "reference_z_m": entry, "species": "Ca40"}}
        fr = [z_exit - 1e-3, z_exit + 0.05]
        base["run"] = {"n_shots": 200, "focal_range_m": fr}
        base["study"] = {"kind": "optimize", "metric": "focal_r68", "budget": 40, "probes": 16, "n_shots": 200,
                         "focal_range_m": fr,
                         "parameters": [{"path": "voltages.lens_switch.v2_v", "lower": 40.0, "upper": 120.0},
                                        {"path": "voltages.lens_switch.delay_s", "lower": 0.0,
                                         "upper": 250e-9}]}
    elif name == "fig9":
        base["geometry"] = {"lens": lens}
        base["voltages"] = {"lens_v": 115.0}
        base["run"] = {"n_shots": 20}
        base["study"] = {"kind": "reflection", "species": "Ca40", "bracket_v": [0.0, 300.0], "tol_v": 0.05}
    elif name == "fig11a":
        base["source"] = {"species": ["Ca40", "Ca40"]}
        base["run"] = {"n_shots": 300, "tof_bin_s": 10e-9}
    elif name == "fig13b":
        base["voltages"] = {"deflection_v": [7.5, 9.1], "jitter_sigma_s": 0.34e-9}
        base["source"] = {"phase_policy": "jittered"}
        base["run"] = {"n_shots": 300, "spot_scale": 2.2, "detection_efficiency": 1.0,
                       "transmission_aperture": {"diameter_m": 300e-6, "center_m": None}}
    else:
        raise KeyError(f"unknown preset {name!r}; known: {list(PRESETS)}")
    return base


PRESETS = {
    "fig1": "2 mK extraction ensemble, grounded deflectors, target at 247 mm",
    "fig2": "start-position study over +-420 um",
    "fig3": "rf trigger phase sweep over one period",
    "fig4_table": "optimized focal spots per lens design, mode and temperature",
    "fig6": "custom lens at 65 V, focal plane search",
    "fig7a": "lens voltage sweep 25/50/65 V",
    "fig7b": "lens misalignment study",
    "fig8": "switched-lens aberration correction on a monochromatic 36 um beam",
    "fig9": "reflection threshold with the lens at 115 V",
    "fig11a": "two-ion crystal time of flight, 10 ns bins",
    "fig13b": "deflected spot scaled x2.2 through a 300 um aperture",
}


def preset(name: str) -> str:
    """Canonical scenario text of a named preset."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {list(PRESETS)}")
    return Scenario(validate(_preset_data(name))).to_text()


def preset_scenario(name: str) -> Scenario:
    return parse_scenario(preset(name))
