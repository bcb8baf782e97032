"""Beam observables: spot diagrams, containment radii, velocity and TOF statistics,
aperture transmission."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .geometry import Aperture

R68_FRACTION = 0.68


class InsufficientDataError(ValueError):
    pass


@dataclass
class SpotDiagram:
    """Hits in one plane. ``hits`` columns: x (m), y (m), t (s), speed (m/s), shot id, ion id."""

    z: float
    hits: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hits, dtype=float)
        if h.size == 0:
            h = np.zeros((0, 6))
        if h.ndim != 2 or h.shape[1] < 4:
            raise ValueError("hits must have columns x, y, t, speed[, shot, ion]")
        if h.shape[1] < 6:
            h = np.hstack([h, np.zeros((len(h), 6 - h.shape[1]))])
            h[:, 4] = np.arange(len(h))
        self.hits = h

    def __len__(self):
        return len(self.hits)

    @property
    def xy(self) -> np.ndarray:
        return self.hits[:, :2]

    @property
    def centroid(self) -> np.ndarray:
        return self.xy.mean(axis=0) if len(self) else np.full(2, np.nan)

    def principal_extents(self):
        """(sigma_major, sigma_minor, angle of the major axis in rad)."""
        if len(self) < 2:
            return 0.0, 0.0, 0.0
        C = np.cov(self.xy.T)
        w, v = np.linalg.eigh(C)
        w = np.clip(w, 0.0, None)
        return float(math.sqrt(w[1])), float(math.sqrt(w[0])), float(math.atan2(v[1, 1], v[0, 1]))


def r68(spot: SpotDiagram, fraction: float = R68_FRACTION) -> float:
    """Smallest radius about the centroid holding ceil(fraction * n) hits."""
    n = len(spot)
    if n < 3:
        raise InsufficientDataError("r68 needs at least 3 hits")
    d = np.sort(np.hypot(*(spot.xy - spot.centroid).T))
    k = math.ceil(fraction * n - 1e-9)
    return float(d[k - 1])


def divergence(spot_or_r68, source_distance: float) -> float:
    """Full-angle divergence 2 r68 / distance (rad)."""
    r = r68(spot_or_r68) if isinstance(spot_or_r68, SpotDiagram) else float(spot_or_r68)
    return 2.0 * r / source_distance


def spot_scale(spot: SpotDiagram, factor: float) -> SpotDiagram:
    """Scale hit positions about the centroid."""
    h = spot.hits.copy()
    c = spot.centroid
    h[:, :2] = c + factor * (h[:, :2] - c)
    return SpotDiagram(spot.z, h)


@dataclass
class VelocityStats:
    mean: float
    spread: float  # sample standard deviation (ddof=1)
    relative: float
    n: int


def velocity_stats(speeds) -> VelocityStats:
    v = np.asarray(speeds, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return VelocityStats(math.nan, math.nan, math.nan, 0)
    s = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    m = float(v.mean())
    return VelocityStats(m, s, s / m if m else math.nan, len(v))


def relative_uncertainty(mean_speed: float, spread: float) -> float:
    return spread / mean_speed


@dataclass
class TofHistogram:
    bin_width: float
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    sigma: float
    per_ion: dict = field(default_factory=dict)  # ion index -> (counts, mean, sigma)
    gauss_sigma: Optional[float] = None

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def tof_histogram(times, bin_width: float, ion_index=None) -> TofHistogram:
    """Histogram of arrival times. ``ion_index`` (per time) gives sub-histograms."""
    t = np.asarray(times, dtype=float)
    ok = np.isfinite(t)
    t = t[ok]
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    if len(t) == 0:
        return TofHistogram(bin_width, np.zeros(1), np.zeros(0, dtype=int), math.nan, math.nan)
    lo = math.floor(t.min() / bin_width) * bin_width
    nb = max(1, int(math.floor((t.max() - lo) / bin_width)) + 1)
    edges = lo + bin_width * np.arange(nb + 1)
    counts = np.zeros(nb, dtype=int)
    idx = np.clip(((t - lo) / bin_width).astype(int), 0, nb - 1)
    np.add.at(counts, idx, 1)
    sig = float(t.std(ddof=1)) if len(t) > 1 else 0.0
    per = {}
    if ion_index is not None:
        ii = np.asarray(ion_index)[ok]
        for k in np.unique(ii):
            sub = t[ii == k]
            c = np.zeros(nb, dtype=int)
            np.add.at(c, idx[ii == k], 1)
            per[int(k)] = (c, float(sub.mean()), float(sub.std(ddof=1)) if len(sub) > 1 else 0.0)
    gs = float(norm.fit(t)[1]) if len(t) > 1 else None
    return TofHistogram(bin_width, edges, counts, float(t.mean()), sig, per, gs)


@dataclass(frozen=True)
class DetectionModel:
    efficiency: float = 1.0
    aperture: Optional[Aperture] = None

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be in [0, 1]")


@dataclass
class Transmission:
    probability: float
    low: float
    high: float
    n: int
    k: int


def wilson_interval(k: int, n: int, z: float = 1.959963984540054):
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    c = (p + z * z / (2 * n)) / den
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, c - h), min(1.0, c + h)


def transmission(spot: SpotDiagram, aperture: Aperture, detection: DetectionModel = DetectionModel(),
                 n_mc: int = 10000, seed: int = 0, n_launched: Optional[int] = None) -> Transmission:
    """Fraction of launched ions passing the aperture and being detected.

    Each Monte Carlo trial draws a hit (uniformly, with replacement) and a
    Bernoulli detection with the model efficiency. Ions lost before the plane
    count as failures when ``n_launched`` exceeds the number of hits.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(3,)))
    n_hits = len(spot)
    total = max(n_launched or n_hits, n_hits)
    if total == 0:
        raise InsufficientDataError("no ions")
    pick = rng.integers(0, total, n_mc)
    inside = np.zeros(n_mc, dtype=bool)
    valid = pick < n_hits
    if n_hits:
        inside[valid] = aperture.passes(spot.xy[pick[valid]])
    detected = rng.random(n_mc) < detection.efficiency
    k = int(np.sum(inside & detected))
    lo, hi = wilson_interval(k, n_mc)
    return Transmission(k / n_mc, lo, hi, n_mc, k)


# ---------------------------------------------------------------------------
# output


def write_spot_csv(path, rows: Sequence) -> None:
    """rows: (shot_id, ion_id, x, y, t, v, outcome)."""
    with open(path, "w") as fh:
        fh.write("shot_id,ion_id,x_m,y_m,t_s,v_mps,outcome\n")
        for r in rows:
            s, i, x, y, t, v, o = r
            fh.write(f"{int(s)},{int(i)},{x:.15e},{y:.15e},{t:.15e},{v:.15e},{o}\n")


def write_histogram_csv(path, hist: TofHistogram) -> None:
    with open(path, "w") as fh:
        fh.write("bin_start_s,count\n")
        for e, c in zip(hist.edges[:-1], hist.counts):
            fh.write(f"{e:.15e},{int(c)}\n")


_UNIT_LABELS = {1.0: "m", 1e-3: "mm", 1e-6: "um", 1e-9: "nm"}


def write_spot_svg(path, spot: SpotDiagram, size: int = 400, unit: float = 1e-6) -> None:
    """Scatter of hits about the centroid with the r68 circle."""
    c = spot.centroid
    d = spot.xy - c
    r = r68(spot) if len(spot) >= 3 else 0.0
    extent = max(np.abs(d).max() if len(d) else 0.0, r, 1e-12) * 1.1
    s = 0.5 * size / extent

    def px(v):
        return 0.5 * size + v * s

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<circle cx="{px(0):.2f}" cy="{px(0):.2f}" r="{r * s:.2f}" fill="#dddddd" stroke="#999999"/>']
    for x, y in d:
        parts.append(f'<circle cx="{px(x):.2f}" cy="{px(-y):.2f}" r="1.5" fill="black"/>')
    parts.append(f'<text x="8" y="18" font-size="12" font-family="sans-serif">'
                 f'z = {spot.z:.4g} m, n = {len(spot)}, r68 = {r / unit:.4g} {_UNIT_LABELS.get(unit, "m")}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
