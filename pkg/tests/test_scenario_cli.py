import json

import pytest

from ionsource import cli
from ionsource.scenario import (PRESETS, REQUIRED_SECTIONS, ScenarioError, default_scenario, parse_scenario,
                                preset, preset_scenario)


def base_dict():
    return json.loads(default_scenario().to_text())


def errors_of(data) -> list:
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(json.dumps(data) if not isinstance(data, str) else data)
    return exc.value.errors


def test_unknown_key_suggests_the_closest():
    d = base_dict()
    d["voltages"]["lens_vv"] = 3.0
    (msg,) = errors_of(d)
    assert "voltages.lens_vv" in msg and "lens_v" in msg


def test_missing_unit_suffix_is_named():
    d = base_dict()
    d["geometry"]["target_z"] = d["geometry"].pop("target_z_m")
    assert any("missing unit suffix" in e and "target_z_m" in e for e in errors_of(d))


@pytest.mark.parametrize("text", ["", "   \n", "{not json"])
def test_empty_or_broken_document(text):
    assert errors_of(text)


@pytest.mark.parametrize("section", REQUIRED_SECTIONS)
def test_missing_section(section):
    d = base_dict()
    del d[section]
    assert any(section in e for e in errors_of(d))


def test_every_error_is_reported_at_once():
    d = base_dict()
    d["voltages"]["dc_v"] = "thirty five"
    d["source"]["temperature_k"] = -1.0
    d["run"]["bogus"] = 1
    assert len(errors_of(d)) >= 3


@pytest.mark.parametrize("name", list(PRESETS))
def test_presets_round_trip(name):
    sc = preset_scenario(name)
    again = parse_scenario(sc.to_text())
    assert again == sc and again.hash == sc.hash
    assert preset(name) == sc.to_text()
    sc.beamline()


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("fig99")


def test_with_value_changes_hash_but_not_original():
    sc = default_scenario()
    other = sc.with_value("voltages.lens_v", 50.0)
    assert other.get("voltages.lens_v") == 50.0
    assert sc.get("voltages.lens_v") == 65.0
    assert other.hash != sc.hash


def test_preset_command(tmp_path, capsys):
    assert cli.main(["preset", "--list"]) == 0
    assert "fig8" in capsys.readouterr().out
    assert cli.main(["preset", "fig1", "--out", str(tmp_path / "a.json")]) == 0
    assert parse_scenario((tmp_path / "a.json").read_text()) == preset_scenario("fig1")
    assert cli.main(["preset", "nope"]) == 2


def test_bad_scenario_exits_2(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text("{}")
    assert cli.main(["run", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err
    assert cli.main(["run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert cli.main(["bogus-command"]) == 2


def test_unstable_trap_exits_3(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text(default_scenario().with_value("voltages.rf_amplitude_v", 0.0).to_text())
    assert cli.main(["solve", "--scenario", str(p)]) == 3
    assert "solver error" in capsys.readouterr().err


def test_environment_supplies_defaults(tmp_path, monkeypatch, capsys):
    p = tmp_path / "s.json"
    p.write_text(preset("fig8"))
    monkeypatch.setenv("IONSRC_SCENARIO", str(p))
    assert cli.main(["solve"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["scenario_hash"] == preset_scenario("fig8").hash
    assert 0.5 < info["lens"]["axis_peak_v"] / preset_scenario("fig8").get("voltages.lens_v") < 1.0


def test_seed_override_and_report(tmp_path, capsys):
    sc = preset_scenario("fig8").with_value("run.n_shots", 40).with_value("study", None)
    p = tmp_path / "s.json"
    p.write_text(sc.to_text())
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", str(p), "--out", str(out), "--seed", "5"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 5
    assert set(summary["files"]) >= {"scenario.json", "spots.csv"}
    capsys.readouterr()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip()
    assert cli.main(["run", "--scenario", str(p), "--out", str(out), "--seed", "-1"]) == 2
