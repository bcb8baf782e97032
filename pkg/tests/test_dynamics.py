import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionsource.constants import COULOMB_K, K_B
from ionsource.dynamics.chain import chain_equilibrium, crystal_hessian, length_scale
from ionsource.dynamics.integrate import (NullSource, Outcome, QuadraticSource, Region, StiffnessError,
                                          Tolerances, ballistic, integrate, write_trajectory_csv)
from ionsource.dynamics.program import (ElectrodeProgram, RfTerm, SwitchEvent, VoltageProgram,
                                        compile_program, constant_program, group_channels, voltage_at)
from ionsource.dynamics.secular import InstabilityError, secular_frequencies
from ionsource.dynamics.species import CA40, N14, IonSpecies, IonState, species_by_name
from ionsource.dynamics.thermal import ThermalSource, sample_thermal, shot_rng
from ionsource.fields.analytic import harmonic_channels, uniform_channels
from ionsource.geometry import Box

OMEGAS = 2 * np.pi * np.array([430e3, 430e3, 280e3])


def uniform_region(field, **kw):
    H, g = uniform_channels(field)
    return Region(QuadraticSource(H, g, [["u"]]), **kw)


UNIT = constant_program({"u": 1.0})


# integrator


def test_uniform_acceleration_energy_gain():
    E = 1.0e3
    d = 2e-3
    r = integrate(IonState([0, 0, 0], [0, 0, 0]), uniform_region([0, 0, E], z_exit=d), UNIT, 1e-3)
    assert r.outcomes == [Outcome.EXITED]
    # events are located to 1 ps, i.e. a few nm at this speed
    assert r.final[0, 3] == pytest.approx(d, abs=5e-9)
    a = CA40.q_over_m * E
    assert r.final[0, 6] ** 2 == pytest.approx(2 * a * r.final[0, 3], rel=1e-10)
    assert r.final[0, 0] == pytest.approx(math.sqrt(2 * d / a), rel=1e-6)


def test_retarding_field_reflects_with_turnaround():
    E, v0 = -2e3, 500.0
    r = integrate(IonState([0, 0, 0], [0, 0, v0]), uniform_region([0, 0, E], z_exit=1.0, z_entry=-1e-4),
                  UNIT, 1e-2)
    assert r.outcomes == [Outcome.REFLECTED]
    z_turn = v0**2 / (2 * CA40.q_over_m * abs(E))
    assert r.turnaround[0, 3] == pytest.approx(z_turn, rel=1e-8)
    # bisection to 1 ps leaves at most a * 1 ps of residual velocity
    assert abs(r.turnaround[0, 6]) < CA40.q_over_m * abs(E) * 2e-12
    # it leaves through the entry plane 0.1 mm behind the start, so it has gained that drop too
    a = CA40.q_over_m * abs(E)
    assert r.final[0, 6] == pytest.approx(-math.sqrt(v0**2 - 2 * a * r.final[0, 3]), rel=1e-8)


def test_harmonic_motion_matches_closed_form():
    w = 2 * np.pi * 1e6
    H, g = harmonic_channels([w, w, w], CA40.mass)
    src = QuadraticSource(H, g, [["h"]])
    t_end = 7.3e-6
    r = integrate(IonState([1e-6, 0, 0], [0, 0, 0]), Region(src), constant_program({"h": 1.0}), t_end)
    assert r.outcomes == [Outcome.TIMEOUT]
    # seven periods at rtol 1e-9 accumulate a phase error near 1e-8
    assert r.final[0, 1] == pytest.approx(1e-6 * math.cos(w * t_end), abs=1e-7 * 1e-6)
    assert r.final[0, 4] == pytest.approx(-1e-6 * w * math.sin(w * t_end), abs=1e-7 * 1e-6 * w)


def test_plane_crossings_and_lateral_exit():
    r = integrate(IonState([0, 0, 0], [100.0, 0, 1000.0]),
                  Region(NullSource(), z_exit=1.0, r_lateral=1e-3, planes=(2e-4, 5e-4)), None, 1.0)
    assert r.outcomes == [Outcome.LATERAL]
    assert r.crossings[0, :, 3] == pytest.approx([2e-4, 5e-4], abs=1e-9)
    assert r.final[0, 1] == pytest.approx(1e-3, abs=100.0 * 1e-12)


def test_solid_box_is_struck():
    box = Box(center=(0, 0, 1e-3), axes=np.eye(3), half=(1e-3, 1e-3, 1e-4))
    r = integrate(IonState([0, 0, 0], [0, 0, 100.0]), Region(NullSource(), z_exit=1.0, solids=[box]), None, 1.0)
    assert r.outcomes == [Outcome.STRUCK]
    assert r.final[0, 3] == pytest.approx(0.9e-3, abs=1e-9)


def test_thin_wall_is_not_stepped_over():
    # no field means steps grow freely; the wall must still be found
    wall = Box(center=(0, 0, 0.05), axes=np.eye(3), half=(1e-2, 1e-2, 1e-6))
    r = integrate(IonState([0, 0, 0], [0, 0, 2e4]), Region(NullSource(), z_exit=1.0, solids=[wall]), None, 1.0)
    assert r.outcomes == [Outcome.STRUCK]
    assert r.final[0, 3] == pytest.approx(0.05 - 1e-6, abs=1e-7)


def test_coulomb_pair_conserves_energy():
    d = 10e-6
    ions = [IonState([0, 0, -d / 2], [0, 0, 0]), IonState([0, 0, d / 2], [0, 0, 0])]
    r = integrate(ions, Region(NullSource()), None, 5e-6)
    sep = r.final[1, 3] - r.final[0, 3]
    ke = 0.5 * CA40.mass_kg * (r.final[0, 6] ** 2 + r.final[1, 6] ** 2)
    U = COULOMB_K * CA40.charge_c**2
    assert ke + U / sep == pytest.approx(U / d, rel=1e-8)
    assert r.final[0, 6] == pytest.approx(-r.final[1, 6], rel=1e-10)


def test_coulomb_can_be_disabled():
    ions = [IonState([0, 0, -5e-6], [0, 0, 0]), IonState([0, 0, 5e-6], [0, 0, 0])]
    r = integrate(ions, Region(NullSource()), None, 1e-6, coulomb=False)
    assert np.all(r.final[:, 4:] == 0)


def test_step_budget_raises():
    with pytest.raises(StiffnessError):
        integrate(IonState([1e-6, 0, 0], [0, 0, 0]), uniform_region([1, 0, 0]), UNIT, 1.0,
                  Tolerances(max_steps=5))
    r = integrate(IonState([1e-6, 0, 0], [0, 0, 0]), uniform_region([1, 0, 0]), UNIT, 1.0,
                  Tolerances(max_steps=5), raise_on_stiff=False)
    assert r.outcomes == [Outcome.STIFF]


def test_channel_mismatch_rejected():
    prog = compile_program(constant_program({"a": 1.0, "b": 2.0}), [["a"], ["b"]])
    with pytest.raises(ValueError):
        integrate(IonState([0, 0, 0], [0, 0, 1]), uniform_region([0, 0, 1]), prog, 1e-6)


def test_switched_field_timing():
    # field switches on at 1 us: no motion before, uniform acceleration after
    prog = VoltageProgram({"u": ElectrodeProgram(0.0, None, (SwitchEvent(1e-6, 1.0, 0.0),))})
    r = integrate(IonState([0, 0, 0], [0, 0, 0]), uniform_region([0, 0, 1e3]), prog, 2e-6)
    a = CA40.q_over_m * 1e3
    assert r.final[0, 3] == pytest.approx(0.5 * a * (1e-6) ** 2, rel=1e-9)


def test_ballistic_propagation():
    row = np.array([[1e-6, 1e-3, -2e-3, 0.1, 10.0, -20.0, 2e4]])
    out = ballistic(row, 0.3)[0]
    dt = 0.2 / 2e4
    assert out[0] == pytest.approx(1e-6 + dt)
    assert out[1:4] == pytest.approx([1e-3 + 10 * dt, -2e-3 - 20 * dt, 0.3])


def test_trajectory_csv(tmp_path):
    r = integrate(IonState([0, 0, 0], [0, 0, 1e3]), Region(NullSource(), z_exit=1e-3), None, 1.0, record_every=1)
    write_trajectory_csv(tmp_path / "t.csv", r)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("t_s,ion_id") and len(lines) == len(r.record) + 1
    r2 = integrate(IonState([0, 0, 0], [0, 0, 1e3]), Region(NullSource(), z_exit=1e-3), None, 1.0)
    with pytest.raises(ValueError):
        write_trajectory_csv(tmp_path / "u.csv", r2)


@settings(max_examples=20, deadline=None)
@given(vx=st.floats(-50, 50), vz=st.floats(200, 3000), E=st.floats(10, 5e3))
def test_energy_conservation_in_static_field(vx, vz, E):
    d = 1e-3
    r = integrate(IonState([0, 0, 0], [vx, 0, vz]), uniform_region([0, 0, E], z_exit=d), UNIT, 1.0)
    v2 = np.sum(r.final[0, 4:] ** 2)
    assert r.final[0, 3] == pytest.approx(d, abs=1e-12 * math.sqrt(v2) * 2)
    assert v2 == pytest.approx(vx * vx + vz * vz + 2 * CA40.q_over_m * E * r.final[0, 3], rel=1e-9)


# voltage programs


def test_linear_ramp_and_jitter():
    p = VoltageProgram({"L2": ElectrodeProgram(35.0, None, (SwitchEvent(100e-9, 85.0, 10e-9),))})
    assert voltage_at(p, "L2", 0.0) == 35.0
    assert voltage_at(p, "L2", 105e-9) == pytest.approx(60.0)
    assert voltage_at(p, "L2", 1e-6) == 85.0
    assert voltage_at(p, "L2", 105e-9, jitter_draw=5e-9) == pytest.approx(35.0)
    assert voltage_at(p, "missing", 1.0) == 0.0
    assert list(p.breakpoints()) == pytest.approx([100e-9, 110e-9])


def test_rf_term_adds_cosine():
    rf = RfTerm(200.0, 2 * np.pi * 1e6, 0.5)
    p = VoltageProgram({"rf": ElectrodeProgram(1.0, rf)})
    t = 0.3e-6
    assert voltage_at(p, "rf", t) == pytest.approx(1.0 + 200 * math.cos(rf.omega * t + 0.5))
    assert p.static_voltages() == {"rf": 1.0}


@pytest.mark.parametrize("bad", [
    lambda: SwitchEvent(0.0, 1.0, -1e-9),
    lambda: RfTerm(1.0, 0.0),
    lambda: ElectrodeProgram(0.0, None, (SwitchEvent(2e-9, 1.0), SwitchEvent(1e-9, 1.0))),
    lambda: VoltageProgram({}, jitter_sigma=-1.0),
    lambda: VoltageProgram({"a": ElectrodeProgram(rf=RfTerm(1, 1.0)),
                            "b": ElectrodeProgram(rf=RfTerm(1, 2.0))}).rf_omega(),
    lambda: compile_program(constant_program({"a": 1.0, "b": 2.0}), [["a", "b"]]),
])
def test_program_validation(bad):
    with pytest.raises(ValueError):
        bad()


def test_group_channels_merges_equal_programs():
    p = constant_program({"s1": 5.0, "s2": 5.0, "s3": 0.0, "d": 0.0, "s4": -1.0})
    ch = group_channels(p, ["s1", "s2", "s3", "s4", "d"], separate=["d"])
    assert ch[0] == ["d"]
    assert sorted(map(sorted, ch[1:])) == [["s1", "s2"], ["s4"]]


def test_compiled_program_shift():
    p = VoltageProgram({"a": ElectrodeProgram(0.0, RfTerm(1.0, 2.0, 0.1), (SwitchEvent(5.0, 1.0, 1.0),))})
    cp = compile_program(p, [["a"]], jitter_draw=0.5, t_shift=2.0)
    assert cp.phase[0] == pytest.approx(0.1 + 4.0)
    assert list(cp.breakpoints) == pytest.approx([3.5, 4.5])


# thermal sampling, chains, species


def test_thermal_sigmas():
    src = ThermalSource(2e-3, OMEGAS)
    sx, sv = src.sigmas(CA40)
    assert sv == pytest.approx(math.sqrt(K_B * 2e-3 / CA40.mass_kg))
    assert sx == pytest.approx(sv / OMEGAS)


def test_thermal_sample_statistics():
    ens = sample_thermal(ThermalSource(2e-3, OMEGAS), CA40, 4000, seed=3)
    sx, sv = ThermalSource(2e-3, OMEGAS).sigmas(CA40)
    s = ens.states[:, 0]
    assert s[:, :3].std(axis=0) == pytest.approx(sx, rel=0.05)
    assert s[:, 3:].std(axis=0) == pytest.approx([sv] * 3, rel=0.05)


def test_shots_depend_only_on_seed_and_index():
    src = ThermalSource(1e-3, OMEGAS)
    a = sample_thermal(src, CA40, 10, seed=5)
    b = sample_thermal(src, CA40, 4, seed=5, start_index=6)
    assert np.array_equal(a.states[6:], b.states)
    assert not np.array_equal(sample_thermal(src, CA40, 1, seed=6).states, a.states[:1])
    x = shot_rng(1, 2, 3).random()
    assert x == shot_rng(1, 2, 3).random()


def test_orbit_sets_secular_amplitude():
    src = ThermalSource(0.0, OMEGAS, orbit=(0, 0, 100e-6))
    s = sample_thermal(src, CA40, 50, seed=1).states[:, 0]
    energy = (s[:, 2] * OMEGAS[2]) ** 2 + s[:, 5] ** 2
    assert np.sqrt(energy) == pytest.approx(np.full(50, 100e-6 * OMEGAS[2]), rel=1e-12)


def test_micromotion_velocity_added_at_phase():
    src = ThermalSource(0.0, OMEGAS, offset=(1e-6, 0, 0), rf_phase=math.pi / 2, rf_omega=1e7,
                        rf_field=lambda p: np.tile([1e3, 0, 0], (len(p), 1)))
    v = sample_thermal(src, CA40, 1).states[0, 0, 3]
    assert v == pytest.approx(CA40.q_over_m * 1e3 / 1e7)


@pytest.mark.parametrize("kw", [{"temperature": -1.0}, {"omegas": (1.0, 1.0, 0.0)},
                                {"temperature": 0.0, "omegas": (1.0, 1.0, 0.0), "orbit": (0, 0, 1e-6)}])
def test_thermal_source_validation(kw):
    args = {"temperature": 1e-3, "omegas": OMEGAS, **kw}
    with pytest.raises(ValueError):
        ThermalSource(**args)


def test_two_ion_crystal_sampling():
    ens = sample_thermal(ThermalSource(2e-3, OMEGAS), [CA40, CA40], 2000, seed=2)
    gap = ens.states[:, 1, 2] - ens.states[:, 0, 2]
    eq = chain_equilibrium(2, OMEGAS[2])
    assert gap.mean() == pytest.approx(eq[1] - eq[0], rel=0.01)
    # the stretch mode is sqrt(3) stiffer, so the gap spread is sqrt(2/3) of twice the single-ion variance
    sx, _ = ThermalSource(2e-3, OMEGAS).sigmas(CA40)
    assert gap.std() == pytest.approx(math.sqrt(2 / 3) * sx[2], rel=0.06)
    with pytest.raises(ValueError):
        sample_thermal(ThermalSource(2e-3, OMEGAS), [CA40, N14], 1)


def test_chain_of_three():
    u = chain_equilibrium(3, OMEGAS[2]) / length_scale(OMEGAS[2])
    assert u == pytest.approx([-(5 / 4) ** (1 / 3), 0.0, (5 / 4) ** (1 / 3)], abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 12), f=st.floats(100e3, 1e6))
def test_chain_is_ordered_symmetric_and_stable(n, f):
    w = 2 * np.pi * f
    z = chain_equilibrium(n, w)
    assert np.all(np.diff(z) > 0)
    assert z == pytest.approx(-z[::-1], abs=1e-12 * length_scale(w))
    pos = np.column_stack([np.zeros((n, 2)), z])
    H = crystal_hessian(pos, [10 * w, 10 * w, w])
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > 0


def test_weak_radial_confinement_gives_zigzag():
    # seven ions need roughly 4x radial over axial confinement to stay linear
    w = 2 * np.pi * 200e3
    z = chain_equilibrium(7, w)
    pos = np.column_stack([np.zeros((7, 2)), z])
    assert np.linalg.eigvalsh(crystal_hessian(pos, [3 * w, 3 * w, w])).min() < 0
    assert np.linalg.eigvalsh(crystal_hessian(pos, [5 * w, 5 * w, w])).min() > 0


def test_chain_validation():
    with pytest.raises(ValueError):
        chain_equilibrium(0, 1.0)
    with pytest.raises(ValueError):
        chain_equilibrium(2, 0.0)


def test_species():
    assert CA40.speed_for_energy(101.0) == pytest.approx(22.0e3, rel=0.01)
    assert species_by_name("Ca40") is species_by_name("40Ca+")
    with pytest.raises(KeyError):
        species_by_name("Xe")
    with pytest.raises(ValueError):
        IonSpecies("x", 0.0)
    with pytest.raises(ValueError):
        IonState([np.nan, 0, 0], [0, 0, 0])


# secular frequency extraction


def test_secular_of_static_well():
    w = np.array([1.0e6, 1.3e6, 0.7e6])
    H, g = harmonic_channels(w, CA40.mass)
    f = secular_frequencies(QuadraticSource(H, g, [["h"]]), constant_program({"h": 1.0}), CA40)
    assert f == pytest.approx(w, rel=1e-4)


def test_unconfined_source_raises():
    H, g = uniform_channels([0, 0, 0])
    with pytest.raises(InstabilityError):
        secular_frequencies(QuadraticSource(H, g, [["u"]]), UNIT, CA40)
