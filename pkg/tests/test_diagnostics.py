import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionsource.diagnostics import (DetectionModel, InsufficientDataError, SpotDiagram, divergence, r68,
                                   spot_scale, tof_histogram, transmission, velocity_stats, wilson_interval,
                                   write_histogram_csv, write_spot_csv, write_spot_svg)
from ionsource.geometry import Aperture


def make_spot(xy, z=0.0):
    xy = np.asarray(xy, dtype=float)
    return SpotDiagram(z, np.column_stack([xy, np.zeros((len(xy), 2))]))


def test_r68_of_a_ring_is_its_radius():
    a = np.linspace(0, 2 * np.pi, 100, endpoint=False)
    spot = make_spot(np.column_stack([3e-6 * np.cos(a), 3e-6 * np.sin(a)]) + 1e-3)
    assert r68(spot) == pytest.approx(3e-6, rel=1e-12)


def test_r68_of_gaussian_approaches_rayleigh_quantile(rng):
    sigma = 2e-6
    spot = make_spot(rng.normal(0, sigma, (200_000, 2)))
    # 2D Gaussian radius is Rayleigh; its 68.27 % quantile is sigma sqrt(-2 ln(1 - 0.6827))
    expected = sigma * math.sqrt(-2 * math.log(1 - 0.6827))
    assert r68(spot) == pytest.approx(expected, rel=0.01)


def test_r68_counts_ceil_fraction():
    spot = make_spot([[float(k), 0.0] for k in (-2, -1, 0, 1, 2)])
    # ceil(0.6827 * 5) = 4 closest hits about x = 0
    assert r68(spot) == 2.0


def test_r68_needs_three_hits():
    with pytest.raises(InsufficientDataError):
        r68(make_spot([[0, 0], [1, 1]]))


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(1e-3, 1e3), dx=st.floats(-1, 1), dy=st.floats(-1, 1), seed=st.integers(0, 1000))
def test_r68_is_translation_invariant_and_scales(scale, dx, dy, seed):
    xy = np.random.default_rng(seed).normal(0, 1e-3, (50, 2))
    base = r68(make_spot(xy))
    assert r68(make_spot(xy + [dx, dy])) == pytest.approx(base, rel=1e-6, abs=1e-12)
    assert r68(make_spot(xy * scale)) == pytest.approx(base * scale, rel=1e-9)


def test_spot_scale_preserves_centroid(rng):
    spot = make_spot(rng.normal(5e-3, 1e-5, (300, 2)))
    s = spot_scale(spot, 1 / math.sqrt(20))
    assert s.centroid == pytest.approx(spot.centroid, abs=1e-15)
    assert r68(spot) / r68(s) == pytest.approx(math.sqrt(20), rel=1e-9)


def test_principal_extents_of_a_tilted_cigar(rng):
    xy = rng.normal(0, 1, (20_000, 2)) * [5e-6, 1e-6]
    c, s = math.cos(0.4), math.sin(0.4)
    spot = make_spot(xy @ np.array([[c, s], [-s, c]]))
    major, minor, ang = spot.principal_extents()
    assert major == pytest.approx(5e-6, rel=0.03) and minor == pytest.approx(1e-6, rel=0.03)
    assert math.tan(ang) == pytest.approx(math.tan(0.4), rel=0.05)


def test_divergence_is_full_angle():
    assert divergence(2e-5, 0.247) == pytest.approx(4e-5 / 0.247)


def test_velocity_stats_sample_spread():
    s = velocity_stats([1.0, 2.0, 3.0, np.nan])
    assert (s.mean, s.spread, s.n) == (2.0, 1.0, 3)
    assert s.relative == 0.5


def test_tof_histogram_bins_and_per_ion(rng):
    t = np.concatenate([rng.normal(10e-6, 2e-9, 500), rng.normal(10.1e-6, 2e-9, 500)])
    ion = np.repeat([0, 1], 500)
    h = tof_histogram(t, 1e-9, ion)
    assert h.n == 1000 and len(h.edges) == len(h.counts) + 1
    assert np.all(np.diff(h.edges) == pytest.approx(1e-9))
    assert h.per_ion[1][1] - h.per_ion[0][1] == pytest.approx(0.1e-6, rel=0.01)
    assert h.per_ion[0][2] == pytest.approx(2e-9, rel=0.1)
    with pytest.raises(ValueError):
        tof_histogram(t, 0.0)


def test_wilson_interval_brackets_estimate():
    lo, hi = wilson_interval(65, 100)
    assert lo < 0.65 < hi
    assert (lo, hi) == pytest.approx((0.5525, 0.7364), abs=1e-3)
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_transmission_counts_lost_ions_and_efficiency():
    inside = make_spot(np.zeros((50, 2)), z=0.25)
    ap = Aperture(1e-3, 0.25)
    full = transmission(inside, ap, n_mc=20_000, seed=1)
    assert full.probability == 1.0
    half_lost = transmission(inside, ap, n_mc=20_000, seed=1, n_launched=100)
    assert half_lost.low < 0.5 < half_lost.high
    eff = transmission(inside, ap, DetectionModel(0.3), n_mc=20_000, seed=1)
    assert eff.low < 0.3 < eff.high
    with pytest.raises(ValueError):
        DetectionModel(1.5)


def test_transmission_is_seeded():
    spot = make_spot(np.random.default_rng(3).normal(0, 1e-3, (100, 2)))
    ap = Aperture(2e-3, 0.0)
    a = transmission(spot, ap, n_mc=5000, seed=4)
    assert a == transmission(spot, ap, n_mc=5000, seed=4)


def test_writers(tmp_path, rng):
    write_spot_csv(tmp_path / "s.csv", [(0, 1, 1e-6, 2e-6, 1e-5, 2e4, "hit")])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "shot_id,ion_id,x_m,y_m,t_s,v_mps,outcome" and lines[1].endswith(",hit")
    h = tof_histogram(rng.normal(1e-5, 1e-9, 100), 1e-9)
    write_histogram_csv(tmp_path / "h.csv", h)
    assert len((tmp_path / "h.csv").read_text().splitlines()) == len(h.counts) + 1
    write_spot_svg(tmp_path / "s.svg", make_spot(rng.normal(0, 1e-6, (30, 2))))
    svg = (tmp_path / "s.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") >= 30
