import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionsource.geometry import (Aperture, GeometryError, LensDesign, LensParams, TrapParams, build_lens,
                                build_parallel_plates, build_sphere, build_trap, build_tube, mesh_audit,
                                panelize, revolve, symmetry_error, write_mesh_csv)


@pytest.fixture(scope="module")
def trap_mesh():
    return panelize(build_trap(), 0.3e-3, 3.0, 0.3)


@pytest.mark.parametrize("target", [2e-3, 1e-3, 0.5e-3])
def test_plate_panels_respect_target_size(target):
    m = panelize(build_parallel_plates(10e-3, 1e-3), target)
    audit = mesh_audit(m)
    assert audit["max_diameter"] <= target * (1 + 1e-9)
    assert audit["degenerate"] == 0


def test_plate_area_is_conserved():
    g = build_parallel_plates(10e-3, 2e-3)
    m = panelize(g, 0.7e-3)
    for name, a in m.electrode_area().items():
        assert a == pytest.approx(g.electrode(name).area(), rel=1e-12)
        assert a == pytest.approx(1e-4, rel=1e-12)


@pytest.mark.parametrize("target", [0.3, 0.15])
def test_sphere_mesh_area_converges(target):
    m = panelize(build_sphere(1.0), target)
    assert m.area.sum() == pytest.approx(4 * math.pi, rel=0.02)
    r = np.linalg.norm(m.centroid, axis=1)
    assert np.all(r < 1.0) and np.all(r > 0.95)


def test_trap_has_four_blades_and_mirror_symmetry(trap_mesh):
    names = trap_mesh.names
    assert {n[-1] for n in names} == set("ABCD")
    assert sum(n.startswith("seg") for n in names) == 32
    assert symmetry_error(trap_mesh, (1, 0, 0)) < 1e-9
    assert symmetry_error(trap_mesh, (0, 1, 0)) < 1e-9


def test_trap_mesh_quads_are_planar(trap_mesh):
    audit = mesh_audit(trap_mesh)
    assert audit["max_nonplanarity"] < 1e-12
    assert audit["degenerate"] == 0


def test_gap_refinement_adds_panels():
    g = build_trap()
    assert len(panelize(g, 0.3e-3, 4.0)) > len(panelize(g, 0.3e-3, 1.0))


def test_content_hash_tracks_settings():
    g = build_parallel_plates()
    a, b, c = panelize(g, 1e-3), panelize(g, 1e-3), panelize(g, 0.9e-3)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()


def test_lens_is_axisymmetric_and_ordered():
    p = LensParams()
    g = build_lens(p)
    assert g.axisymmetric and g.names == ["L1", "L2", "L3"]
    edges = np.array(p.z_edges).ravel()
    assert np.all(np.diff(edges) > 0)
    assert p.z_exit - p.z_entry == pytest.approx(sum(p.electrode_thicknesses) + p.gap_12 + p.gap_23)


@pytest.mark.parametrize("design", list(LensDesign))
def test_lens_designs_mesh(design):
    m = panelize(build_lens(LensParams(design=design)), 50e-6, 2.0)
    assert m.kind != "3d"
    assert set(m.electrode_area()) == {"L1", "L2", "L3"}
    assert min(m.electrode_area().values()) > 0


def test_revolved_lens_matches_ring_area():
    g = build_lens()
    ring = panelize(g, 100e-6)
    full = panelize(revolve(g), 300e-6)
    for k, a in ring.electrode_area().items():
        assert full.electrode_area()[k] == pytest.approx(a, rel=0.03)


def test_tube_builds():
    m = panelize(build_tube(), 0.5e-3)
    assert m.electrode_area()["tube"] > 0


@pytest.mark.parametrize("kwargs", [
    {"gap_12": 0.0},
    {"gap_23": -1e-6},
    {"electrode_thicknesses": (1e-3, 1e-3)},
    {"electrode_thicknesses": (1e-3, -1e-3, 1e-3)},
    {"aperture_diameter": 0.0},
    {"outer_radius": 0.5e-3},
])
def test_bad_lens_parameters_rejected(kwargs):
    with pytest.raises(GeometryError):
        LensParams(**kwargs)


@pytest.mark.parametrize("kwargs", [
    {"segment_count": 1},
    {"blade_length": 5e-3},
    {"ion_segment": 12},
    {"blade_thickness": 0.0},
    {"rail_width": 1e-3, "rail_gap": 1e-3},
])
def test_bad_trap_parameters_rejected(kwargs):
    with pytest.raises(GeometryError):
        TrapParams(**kwargs)


@pytest.mark.parametrize("args", [(0.0,), (1e-3, 0.5), (1e-3, 1.0, -1.0)])
def test_bad_mesh_settings_rejected(args):
    with pytest.raises(GeometryError):
        panelize(build_parallel_plates(), *args)


def test_mesh_csv_has_one_row_per_panel(tmp_path):
    m = panelize(build_parallel_plates(), 2e-3)
    path = tmp_path / "mesh.csv"
    write_mesh_csv(m, path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:2] == ["panel_id", "electrode"]
    assert len(rows) == len(m) + 1


@settings(max_examples=50, deadline=None)
@given(t1=st.floats(0.1e-3, 3e-3), t2=st.floats(0.1e-3, 3e-3), t3=st.floats(0.1e-3, 3e-3),
       g12=st.floats(50e-6, 1e-3), g23=st.floats(50e-6, 1e-3))
def test_lens_length_is_sum_of_parts(t1, t2, t3, g12, g23):
    p = LensParams(electrode_thicknesses=(t1, t2, t3), gap_12=g12, gap_23=g23)
    assert p.z_exit - p.z_entry == pytest.approx(t1 + t2 + t3 + g12 + g23, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-1e-3, 1e-3), y=st.floats(-1e-3, 1e-3), d=st.floats(1e-6, 2e-3))
def test_aperture_passes_is_a_disc(x, y, d):
    ap = Aperture(d, 0.25, (1e-4, -2e-4))
    inside = bool(ap.passes(np.array([[x, y]]))[0])
    assert inside == ((x - 1e-4) ** 2 + (y + 2e-4) ** 2 <= (d / 2) ** 2)
