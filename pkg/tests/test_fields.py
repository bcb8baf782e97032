import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionsource.constants import AMU, E_CHARGE, EPS0
from ionsource.fields.analytic import (QuadrupoleParams, harmonic_channels, ideal_quadrupole_field,
                                       ideal_quadrupole_potential, mathieu_beta, uniform_channels)
from ionsource.fields.bem import (DomainError, SolverError, SolverSettings, boundary_residual,
                                  on_axis_profile, solve_basis)
from ionsource.fields.maps import AxisSeries, GridSpec, build_field_map
from ionsource.geometry import LensParams, build_lens, build_parallel_plates, build_sphere, panelize


@pytest.fixture(scope="module")
def sphere():
    return solve_basis(panelize(build_sphere(1.0), 0.2), use_cache=False)


@pytest.fixture(scope="module")
def plates():
    return solve_basis(panelize(build_parallel_plates(10e-3, 1e-3), 0.5e-3), use_cache=False)


@pytest.fixture(scope="module")
def lens():
    return solve_basis(panelize(build_lens(), 50e-6, 2.0), use_cache=False)


def test_sphere_capacitance(sphere):
    C = sphere.capacitance_matrix()
    assert C[0, 0] == pytest.approx(4 * math.pi * EPS0, rel=0.01)


def test_axisymmetric_sphere_matches_closed_form():
    b = solve_basis(panelize(build_sphere(1.0, axisymmetric=True), 0.05), use_cache=False)
    r = np.array([1.5, 3.0, 8.0])
    pts = np.column_stack([r * 0.6, np.zeros(3), r * 0.8])
    assert b.potential(pts, {"sphere": 1.0}) * r == pytest.approx(np.ones(3), rel=1e-3)


def test_point_inside_conductor_is_rejected(sphere):
    with pytest.raises(DomainError):
        sphere.potential([[0.0, 0.0, 0.1]], {"sphere": 1.0})


def test_unknown_electrode_name(sphere):
    with pytest.raises(KeyError):
        sphere.potential([[3.0, 0, 0]], {"nope": 1.0})


def test_condition_limit_raises(plates):
    with pytest.raises(SolverError, match="ill-conditioned"):
        solve_basis(plates.mesh, SolverSettings(condition_limit=1.0), use_cache=False)


@pytest.mark.parametrize("fixture, limit", [("sphere", 0.01), ("lens", 0.05)])
def test_boundary_residual(request, fixture, limit):
    assert boundary_residual(request.getfixturevalue(fixture)) < limit


def test_capacitance_reciprocity(plates):
    C = plates.capacitance_matrix()
    assert C[0, 1] == pytest.approx(C[1, 0], rel=1e-6)
    assert C[0, 0] > 0 > C[0, 1]


def test_field_between_plates(plates):
    E = plates.efield([[0.0, 0.0, 0.0]], {"top": 1.0, "bottom": 0.0})[0]
    assert E[2] == pytest.approx(-1.0 / 1e-3, rel=0.02)
    assert abs(E[0]) < 1e-3 * abs(E[2])


def test_field_is_minus_gradient(plates, rng):
    v = {"top": 2.0, "bottom": -1.0}
    p = rng.uniform(-2e-3, 2e-3, (10, 3))
    p[:, 2] = rng.uniform(-0.3e-3, 0.3e-3, 10)
    h = 1e-7
    E = plates.efield(p, v)
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        grad = (plates.potential(p + d, v) - plates.potential(p - d, v)) / (2 * h)
        assert np.allclose(-grad, E[:, k], rtol=1e-4, atol=1e-2)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-50, 50), b=st.floats(-50, 50))
def test_potential_is_linear_in_voltages(plates, a, b):
    p = np.array([[1e-3, -0.5e-3, 0.2e-3], [-3e-3, 2e-3, -0.1e-3]])
    lhs = plates.potential(p, {"top": a, "bottom": b})
    rhs = a * plates.potential(p, {"top": 1.0, "bottom": 0.0}) + b * plates.potential(p, {"top": 0.0, "bottom": 1.0})
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_field_map_interpolates_basis(sphere):
    fine = GridSpec((1.5, -1.0, -1.0), (3.5, 1.0, 1.0), (0.05, 0.05, 0.05))
    coarse = GridSpec((-6.0, -6.0, -6.0), (6.0, 6.0, 6.0), (0.5, 0.5, 0.5))
    fm = build_field_map(sphere, [["sphere"]], fine, coarse, use_cache=False)
    p = np.array([[2.01, 0.03, 0.02], [3.2, -0.4, 0.7]])
    E, phi = fm.evaluate(p, np.array([1.0]))
    assert phi == pytest.approx(sphere.potential(p, {"sphere": 1.0}), rel=1e-3)
    assert E == pytest.approx(sphere.efield(p, {"sphere": 1.0}), rel=2e-3, abs=1e-4)


def test_field_map_cache_roundtrip(sphere, tmp_path):
    fine = GridSpec((1.5, -0.5, -0.5), (2.5, 0.5, 0.5), (0.1, 0.1, 0.1))
    coarse = GridSpec((-4.0, -4.0, -4.0), (4.0, 4.0, 4.0), (1.0, 1.0, 1.0))
    a = build_field_map(sphere, [["sphere"]], fine, coarse, cache_dir=tmp_path)
    assert list(tmp_path.glob("fieldmap-*.npz"))
    b = build_field_map(sphere, [["sphere"]], fine, coarse, cache_dir=tmp_path)
    assert np.array_equal(a.G1, b.G1) and np.array_equal(a.G2, b.G2)


def test_basis_cache_is_bit_identical(tmp_path):
    mesh = panelize(build_parallel_plates(10e-3, 1e-3), 1e-3)
    cold = solve_basis(mesh, cache_dir=tmp_path)
    warm = solve_basis(mesh, cache_dir=tmp_path)
    assert np.array_equal(cold.charges, warm.charges)


def test_axis_series_matches_direct_sum(lens):
    s = AxisSeries(lens, [["L2"]], (0.236, 0.248))
    pts = np.array([[1e-5, 2e-5, 0.2405], [1e-4, 0.0, 0.2412], [0.0, 0.0, 0.2420]])
    E, phi = s.evaluate(pts, [1.0])
    phi_d, E_d = lens.evaluate(pts, lens.weights([{"L2": 1.0}]))
    assert phi == pytest.approx(phi_d[:, 0], rel=1e-6)
    assert E == pytest.approx(E_d[:, 0, :], rel=1e-5, abs=1e-3)


def test_axis_series_rejects_3d_basis(sphere):
    with pytest.raises(ValueError):
        AxisSeries(sphere, [["sphere"]], (0.0, 1.0))


def test_on_axis_profile_peaks_inside_centre_electrode(lens):
    prof = on_axis_profile(lens, {"L1": 0.0, "L2": 1.0, "L3": 0.0}, (0.235, 0.25))
    (_, _), (z0, z1), (_, _) = LensParams().z_edges
    assert z0 < prof.peak_z < z1
    assert 0.5 < prof.peak < 1.0
    with pytest.raises(ValueError):
        on_axis_profile(lens, {"L2": 1.0}, (0.235, 0.25), n_samples=1)


# closed-form fields


def test_paper_drive_q():
    qp = QuadrupoleParams(200.0, 2 * math.pi * 12.155e6, 1e-3)
    assert qp.mathieu_q(40.0) == pytest.approx(0.1656, abs=2e-4)
    assert qp.secular_first_order(40.0) / (2 * math.pi) == pytest.approx(711.6e3, rel=1e-3)


@pytest.mark.parametrize("a, q, expected", [(0.25, 0.0, 0.5), (0.0, 0.05, 0.05 / math.sqrt(2))])
def test_mathieu_beta_limits(a, q, expected):
    assert mathieu_beta(a, q) == pytest.approx(expected, rel=2e-3)


def test_mathieu_beta_unstable():
    with pytest.raises(ValueError):
        mathieu_beta(0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-1e-3, 1e-3), y=st.floats(-1e-3, 1e-3), z=st.floats(-1e-3, 1e-3), t=st.floats(0, 1e-6))
def test_quadrupole_field_is_minus_gradient(x, y, z, t):
    qp = QuadrupoleParams(dc_axial_curvature=4e6)
    p = np.array([x, y, z])
    E = ideal_quadrupole_field(p, t, qp)
    h = 1e-7
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        g = (ideal_quadrupole_potential(p + d, t, qp) - ideal_quadrupole_potential(p - d, t, qp)) / (2 * h)
        assert -g == pytest.approx(E[k], rel=1e-6, abs=1e-3)


def test_quadratic_channels_reproduce_potential():
    qp = QuadrupoleParams(dc_axial_curvature=3e6)
    H, g = qp.quadratic_channels()
    p = np.array([2e-4, -1e-4, 3e-4])
    rf = qp.rf_amplitude * math.cos(qp.rf_phase)
    phi = rf * (0.5 * p @ H[0] @ p) + qp.dc_axial_curvature * (0.5 * p @ H[1] @ p)
    assert phi == pytest.approx(ideal_quadrupole_potential(p, 0.0, qp), rel=1e-12)


def test_harmonic_and_uniform_channels():
    H, g = harmonic_channels([1e6, 2e6, 3e6], 40.0)
    assert H[0, 2, 2] == pytest.approx(9e12 * 40 * AMU / E_CHARGE)
    H, g = uniform_channels([1.0, -2.0, 3.0])
    assert np.all(H == 0) and g[0].tolist() == [-1.0, 2.0, -3.0]
