"""Parameterized electrode geometries and their panel meshes.

Geometries are built from a small set of primitives:

* :class:`Rect` -- a planar parallelogram in 3D (trap blade faces),
* :class:`Segment` -- a generator line in the (r, z) half plane that is
  swept around the z axis (lens electrodes, tubes),
* :class:`SphereSurface` -- a closed sphere, used as a solver test body.

``panelize`` turns a :class:`GeometrySet` into either a :class:`PanelMesh`
(flat 3D panels) or a :class:`RingMesh` (conical ring frusta).

Coordinates are SI metres. The trap axis (extraction direction) is +z and
the trapped ion sits at the origin.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "Rect",
    "Segment",
    "SphereSurface",
    "Box",
    "Annulus",
    "Ball",
    "Electrode",
    "GeometrySet",
    "TrapParams",
    "LensDesign",
    "LensParams",
    "TubeParams",
    "Aperture",
    "PanelMesh",
    "RingMesh",
    "build_trap",
    "build_lens",
    "build_tube",
    "build_sphere",
    "build_parallel_plates",
    "revolve",
    "panelize",
    "mesh_audit",
    "symmetry_error",
    "write_mesh_csv",
]

SQRT_HALF = math.sqrt(0.5)
BLADES = "ABCD"


class GeometryError(ValueError):
    """Invalid geometry parameters."""


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Rect:
    """Planar parallelogram ``origin + a*u + b*v`` for a, b in [0, 1].

    ``gap_edges`` flags the four edges (b=0, a=1, b=1, a=0) that border an
    inter-electrode gap; panels are refined towards flagged edges.
    """

    origin: tuple
    u: tuple
    v: tuple
    gap_edges: tuple = (False, False, False, False)

    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    def mirrored(self, sx: float, sy: float) -> "Rect":
        o, u, v = (np.array(x, dtype=float) for x in (self.origin, self.u, self.v))
        s = np.array([sx, sy, 1.0])
        return Rect(tuple(o * s), tuple(u * s), tuple(v * s), self.gap_edges)


@dataclass(frozen=True)
class Segment:
    """Generator line from (r0, z0) to (r1, z1), swept around the z axis."""

    r0: float
    z0: float
    r1: float
    z1: float
    gap0: bool = False
    gap1: bool = False

    def length(self) -> float:
        return math.hypot(self.r1 - self.r0, self.z1 - self.z0)

    def area(self) -> float:
        return math.pi * (self.r0 + self.r1) * self.length()


@dataclass(frozen=True)
class SphereSurface:
    center: tuple
    radius: float

    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2


# solids (used for impact detection and domain checks)


@dataclass(frozen=True)
class Box:
    """Oriented box: ``center + sum_i c_i axes[i]`` with ``|c_i| <= half[i]``."""

    center: tuple
    axes: tuple
    half: tuple

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points) - np.asarray(self.center)
        c = p @ np.asarray(self.axes).T
        return np.all(np.abs(c) <= np.asarray(self.half), axis=1)


@dataclass(frozen=True)
class Annulus:
    r_in: float
    r_out: float
    z0: float
    z1: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        r = np.hypot(p[:, 0], p[:, 1])
        return (r >= self.r_in) & (r <= self.r_out) & (p[:, 2] >= self.z0) & (p[:, 2] <= self.z1)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points) - np.asarray(self.center)
        return np.einsum("ij,ij->i", p, p) < self.radius**2


@dataclass
class Electrode:
    name: str
    primitives: list
    axisymmetric: bool = False

    def area(self) -> float:
        return float(sum(p.area() for p in self.primitives))


@dataclass
class GeometrySet:
    """Named electrodes plus symmetry metadata.

    ``mirror_planes`` holds unit normals of mirror planes through the origin
    (panel *sets* map onto themselves; electrode names may permute).
    """

    electrodes: list
    solids: list = field(default_factory=list)
    mirror_planes: list = field(default_factory=list)
    rotational_axis: Optional[tuple] = None
    focus: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> list:
        return [e.name for e in self.electrodes]

    @property
    def axisymmetric(self) -> bool:
        return bool(self.electrodes) and all(e.axisymmetric for e in self.electrodes)

    def electrode(self, name: str) -> Electrode:
        for e in self.electrodes:
            if e.name == name:
                return e
        raise KeyError(name)

    def bounding_box(self) -> tuple:
        pts = []
        for e in self.electrodes:
            for p in e.primitives:
                if isinstance(p, Rect):
                    o, u, v = (np.asarray(x) for x in (p.origin, p.u, p.v))
                    pts.extend([o, o + u, o + v, o + u + v])
                elif isinstance(p, Segment):
                    rmax = max(p.r0, p.r1)
                    for z in (p.z0, p.z1):
                        pts.extend([(-rmax, -rmax, z), (rmax, rmax, z)])
                elif isinstance(p, SphereSurface):
                    c = np.asarray(p.center)
                    pts.extend([c - p.radius, c + p.radius])
        pts = np.asarray(pts, dtype=float)
        return tuple(pts.min(axis=0)), tuple(pts.max(axis=0))

    def inside_conductor(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        hit = np.zeros(len(points), dtype=bool)
        for s in self.solids:
            hit |= s.contains(points)
        return hit

    def merged(self, other: "GeometrySet") -> "GeometrySet":
        clash = set(self.names) & set(other.names)
        if clash:
            raise GeometryError(f"duplicate electrode names: {sorted(clash)}")
        return GeometrySet(
            self.electrodes + other.electrodes,
            self.solids + other.solids,
            [],
            self.rotational_axis if self.rotational_axis == other.rotational_axis else None,
            self.focus,
            {**self.meta, **other.meta},
        )


# ---------------------------------------------------------------------------
# parameter sets


def _positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise GeometryError(f"{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class TrapParams:
    """Segmented x-blade linear Paul trap.

    Published values: 410 um blades, 65 mm long, 2 mm between opposing blades,
    eight 0.7 mm segments per blade. The remaining dimensions are not
    published; the defaults were chosen so that the reconstructed trap gives
    the reported secular frequencies and extraction energy.
    """

    blade_thickness: float = 410e-6
    blade_length: float = 65e-3
    blade_separation: float = 2e-3
    segment_width: float = 0.7e-3
    segment_count: int = 8
    segment_gap: float = 80e-6
    blade_depth: float = 1.6e-3
    rail_width: float = 20e-6  # rf strip on top/bottom beside the inner face
    rail_gap: float = 40e-6
    deflection_electrode: bool = True
    deflection_width: float = 2.0e-3
    rf_rail: bool = True
    ion_segment: Optional[int] = None

    def __post_init__(self):
        for n in ("blade_thickness", "blade_length", "blade_separation", "segment_width",
                  "segment_gap", "blade_depth", "deflection_width"):
            _positive(n, getattr(self, n))
        if int(self.segment_count) != self.segment_count or self.segment_count < 2:
            raise GeometryError("segment_count must be an integer >= 2")
        if self.rf_rail:
            _positive("rail_width", self.rail_width)
            _positive("rail_gap", self.rail_gap)
            if self.rail_width + self.rail_gap >= self.blade_depth:
                raise GeometryError("rail does not leave room for dc segments")
        used = self.segment_count * self.pitch
        if self.deflection_electrode:
            used += self.deflection_width
        if used > self.blade_length:
            raise GeometryError("segments do not fit within blade_length")
        k = self.trap_segment
        if not 1 <= k <= self.segment_count:
            raise GeometryError("ion_segment outside 1..segment_count")

    @property
    def pitch(self) -> float:
        return self.segment_width + self.segment_gap

    @property
    def trap_segment(self) -> int:
        if self.ion_segment is not None:
            return int(self.ion_segment)
        return self.segment_count // 2 + 1

    @property
    def r_inner(self) -> float:
        return 0.5 * self.blade_separation

    def segment_center(self, k: int) -> float:
        return (k - self.trap_segment) * self.pitch

    @property
    def z_front(self) -> float:
        z = self.segment_center(self.segment_count) + 0.5 * self.segment_width
        if self.deflection_electrode:
            z += self.segment_gap + self.deflection_width
        return z

    @property
    def z_back(self) -> float:
        return self.z_front - self.blade_length


class LensDesign(str, enum.Enum):
    SIMPLE_SYMMETRIC = "SimpleSymmetric"
    SEPTIER_LIKE = "SeptierLike"
    CUSTOM_ASYMMETRIC = "CustomAsymmetric"


_LENS_DEFAULTS = {
    # aperture, gap12, gap23, thicknesses (L1, L2, L3)
    LensDesign.SIMPLE_SYMMETRIC: (1.0e-3, 0.5e-3, 0.5e-3, (1.0e-3, 1.0e-3, 1.0e-3)),
    LensDesign.SEPTIER_LIKE: (1.0e-3, 0.3e-3, 1.2e-3, (0.4e-3, 1.4e-3, 0.6e-3)),
    LensDesign.CUSTOM_ASYMMETRIC: (1.0e-3, 150e-6, 150e-6, (0.5e-3, 0.9e-3, 2.6e-3)),
}


@dataclass(frozen=True)
class LensParams:
    """Three-electrode einzel lens.

    ``axial_position`` is the z of the entrance face of L1 measured from the
    trap centre. ``None`` fields take the design defaults. The custom design
    keeps the published 1 mm apertures and 150 um gaps; electrode thicknesses
    are read approximately from drawings and then fixed so that the 65 V focus
    lands just behind L3.
    """

    design: LensDesign = LensDesign.CUSTOM_ASYMMETRIC
    aperture_diameter: Optional[float] = None
    gap_12: Optional[float] = None
    gap_23: Optional[float] = None
    electrode_thicknesses: Optional[tuple] = None
    axial_position: float = 0.240
    outer_radius: float = 3.0e-3

    def __post_init__(self):
        object.__setattr__(self, "design", LensDesign(self.design))
        d_ap, d_g12, d_g23, d_t = _LENS_DEFAULTS[self.design]
        if self.aperture_diameter is None:
            object.__setattr__(self, "aperture_diameter", d_ap)
        if self.gap_12 is None:
            object.__setattr__(self, "gap_12", d_g12)
        if self.gap_23 is None:
            object.__setattr__(self, "gap_23", d_g23)
        if self.electrode_thicknesses is None:
            object.__setattr__(self, "electrode_thicknesses", d_t)
        object.__setattr__(self, "electrode_thicknesses", tuple(float(t) for t in self.electrode_thicknesses))
        _positive("aperture_diameter", self.aperture_diameter)
        if not (self.gap_12 > 0 and self.gap_23 > 0):
            raise GeometryError("lens gaps must be > 0 (overlapping electrodes)")
        if len(self.electrode_thicknesses) != 3:
            raise GeometryError("need three electrode thicknesses")
        for t in self.electrode_thicknesses:
            _positive("electrode thickness", t)
        if self.outer_radius <= 0.5 * self.aperture_diameter * 1.2:
            raise GeometryError("outer_radius too small for aperture")

    @property
    def z_edges(self) -> list:
        """(z_start, z_end) of L1, L2, L3."""
        t1, t2, t3 = self.electrode_thicknesses
        z = self.axial_position
        e1 = (z, z + t1)
        e2 = (e1[1] + self.gap_12, e1[1] + self.gap_12 + t2)
        e3 = (e2[1] + self.gap_23, e2[1] + self.gap_23 + t3)
        return [e1, e2, e3]

    @property
    def z_entry(self) -> float:
        return self.z_edges[0][0]

    @property
    def z_exit(self) -> float:
        return self.z_edges[2][1]


@dataclass(frozen=True)
class TubeParams:
    """Cylindrical post-acceleration tube."""

    inner_radius: float = 1.0e-3
    wall: float = 0.5e-3
    length: float = 20e-3
    axial_position: float = 0.260

    def __post_init__(self):
        for n in ("inner_radius", "wall", "length"):
            _positive(n, getattr(self, n))


@dataclass(frozen=True)
class Aperture:
    diameter: float
    plane_z: float
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        _positive("aperture diameter", self.diameter)

    def passes(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        d = xy - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= (0.5 * self.diameter) ** 2


# ---------------------------------------------------------------------------
# builders


def _blade_rect(rho0, tau0, z0, d_rho, d_tau, d_z, gaps):
    """Rect in the frame of blade A (radial direction (1,1)/sqrt2)."""
    s = SQRT_HALF
    origin = (s * (rho0 - tau0), s * (rho0 + tau0), z0)
    u = (s * (d_rho - d_tau), s * (d_rho + d_tau), 0.0)
    v = (0.0, 0.0, d_z)
    return Rect(origin, u, v, gaps)


_BLADE_SIGNS = {"A": (1.0, 1.0), "B": (-1.0, 1.0), "C": (-1.0, -1.0), "D": (1.0, -1.0)}


def _blade_box(p: TrapParams, sx: float, sy: float) -> Box:
    s = SQRT_HALF
    rho_c = p.r_inner + 0.5 * p.blade_depth
    zc = 0.5 * (p.z_front + p.z_back)
    e_r = (sx * s, sy * s, 0.0)
    e_t = (-e_r[1], e_r[0], 0.0)
    center = (e_r[0] * rho_c, e_r[1] * rho_c, zc)
    return Box(center, (e_r, e_t, (0.0, 0.0, 1.0)),
               (0.5 * p.blade_depth, 0.5 * p.blade_thickness, 0.5 * p.blade_length))


def build_trap(params: TrapParams = TrapParams()) -> GeometrySet:
    """Four x-arranged blades with dc segments, deflectors and inner rails.

    Segment k of blade X is named ``seg{k}{X}`` and covers the top and bottom
    faces of the blade (tied). The inner edge of blades A and C carries the rf
    rail ``rf{A,C}``; B and D carry grounded rails ``gnd{B,D}``. The
    deflection electrode ``defl{X}`` follows the last segment at the
    extraction end.
    """
    p = params
    t = p.blade_thickness
    r_in = p.r_inner
    depth = p.blade_depth
    if p.rf_rail:
        rho_seg = r_in + p.rail_width + p.rail_gap
    else:
        rho_seg = r_in
    d_rho = r_in + depth - rho_seg

    def faces(rho0, d_rho_, z0, dz, gaps):
        # top (tau=+t/2) and bottom (tau=-t/2) faces
        return [
            _blade_rect(rho0, 0.5 * t, z0, d_rho_, 0.0, dz, gaps),
            _blade_rect(rho0, -0.5 * t, z0, d_rho_, 0.0, dz, gaps),
        ]

    canonical: dict = {}
    rail_gaps = (False, True, False, False)
    for k in range(1, p.segment_count + 1):
        zc = p.segment_center(k)
        canonical[f"seg{k}"] = faces(rho_seg, d_rho, zc - 0.5 * p.segment_width, p.segment_width,
                                     (True, False, True, p.rf_rail))
    if p.deflection_electrode:
        z0 = p.segment_center(p.segment_count) + 0.5 * p.segment_width + p.segment_gap
        canonical["defl"] = faces(rho_seg, d_rho, z0, p.deflection_width, (True, False, False, p.rf_rail))
    if p.rf_rail:
        rail = faces(r_in, p.rail_width, p.z_back, p.blade_length, rail_gaps)
        rail.append(_blade_rect(r_in, -0.5 * t, p.z_back, 0.0, t, p.blade_length,
                                (False, False, False, False)))
        canonical["rail"] = rail

    electrodes = []
    for blade in BLADES:
        sx, sy = _BLADE_SIGNS[blade]
        for key, rects in canonical.items():
            if key == "rail":
                name = ("rf" if blade in "AC" else "gnd") + blade
            else:
                name = key + blade
            electrodes.append(Electrode(name, [r.mirrored(sx, sy) for r in rects]))
    solids = [_blade_box(p, *_BLADE_SIGNS[b]) for b in BLADES]
    diag = 1.0 / math.sqrt(2.0)
    return GeometrySet(
        electrodes,
        solids=solids,
        mirror_planes=[(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (diag, -diag, 0.0), (diag, diag, 0.0)],
        focus=(0.0, 0.0, 0.0),
        meta={"kind": "trap", "params": p},
    )


def _ring_body(name: str, r_in: float, r_out: float, z0: float, z1: float,
               gap_front: bool, gap_back: bool, chamfer: float = 0.0) -> Electrode:
    """Annular electrode with rectangular (optionally chamfered) cross-section."""
    if chamfer > 0:
        # inclined bore: aperture r_in at the front, r_in + chamfer at the back
        segs = [
            Segment(r_in, z0, r_in + chamfer, z1, gap_front, gap_back),
            Segment(r_in + chamfer, z1, r_out, z1, gap_back, False),
            Segment(r_out, z1, r_out, z0, False, False),
            Segment(r_out, z0, r_in, z0, False, gap_front),
        ]
    else:
        segs = [
            Segment(r_in, z0, r_in, z1, gap_front, gap_back),
            Segment(r_in, z1, r_out, z1, gap_back, False),
            Segment(r_out, z1, r_out, z0, False, False),
            Segment(r_out, z0, r_in, z0, False, gap_front),
        ]
    return Electrode(name, segs, axisymmetric=True)


def build_lens(params: LensParams = LensParams()) -> GeometrySet:
    """Three coaxial electrodes L1, L2, L3 (axisymmetric)."""
    p = params
    a = 0.5 * p.aperture_diameter
    (z10, z11), (z20, z21), (z30, z31) = p.z_edges
    if not (z11 < z20 and z21 < z30):
        raise GeometryError("lens electrodes overlap")
    if p.design == LensDesign.SEPTIER_LIKE:
        # different apertures and an inclined centre bore
        els = [
            _ring_body("L1", 0.8 * a, p.outer_radius, z10, z11, False, True),
            _ring_body("L2", a, p.outer_radius, z20, z21, True, True, chamfer=0.3 * a),
            _ring_body("L3", 1.3 * a, p.outer_radius, z30, z31, True, False),
        ]
        radii = (0.8 * a, a, 1.3 * a)
    else:
        els = [
            _ring_body("L1", a, p.outer_radius, z10, z11, False, True),
            _ring_body("L2", a, p.outer_radius, z20, z21, True, True),
            _ring_body("L3", a, p.outer_radius, z30, z31, True, False),
        ]
        radii = (a, a, a)
    solids = [Annulus(r, p.outer_radius, z0, z1) for r, (z0, z1) in zip(radii, p.z_edges)]
    return GeometrySet(
        els,
        solids=solids,
        mirror_planes=[(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)],
        rotational_axis=(0.0, 0.0, 1.0),
        focus=(0.0, 0.0, 0.5 * (z10 + z31)),
        meta={"kind": "lens", "params": p, "bore_radii": radii},
    )


def build_tube(params: TubeParams = TubeParams(), name: str = "tube") -> GeometrySet:
    p = params
    z0, z1 = p.axial_position, p.axial_position + p.length
    el = _ring_body(name, p.inner_radius, p.inner_radius + p.wall, z0, z1, False, False)
    return GeometrySet(
        [el],
        solids=[Annulus(p.inner_radius, p.inner_radius + p.wall, z0, z1)],
        rotational_axis=(0.0, 0.0, 1.0),
        focus=(0.0, 0.0, 0.5 * (z0 + z1)),
        meta={"kind": "tube", "params": p},
    )


def build_sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), axisymmetric: bool = False,
                 name: str = "sphere") -> GeometrySet:
    """Isolated conducting sphere (solver test body)."""
    _positive("radius", radius)
    if axisymmetric:
        if tuple(center[:2]) != (0.0, 0.0):
            raise GeometryError("axisymmetric sphere must be centred on the z axis")
        n = 8
        zc = center[2]
        prims = []
        for i in range(n):
            t0, t1 = math.pi * i / n, math.pi * (i + 1) / n
            prims.append(_ArcSegment(radius, zc, t0, t1))
        el = Electrode(name, prims, axisymmetric=True)
        axis = (0.0, 0.0, 1.0)
    else:
        el = Electrode(name, [SphereSurface(tuple(center), radius)])
        axis = None
    return GeometrySet([el], solids=[Ball(tuple(center), radius)],
                       mirror_planes=[(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)],
                       rotational_axis=axis, focus=tuple(center), meta={"kind": "sphere"})


@dataclass(frozen=True)
class _ArcSegment:
    """Circular arc of a sphere meridian (polar angle t0..t1)."""

    radius: float
    zc: float
    t0: float
    t1: float

    def area(self) -> float:
        return 2 * math.pi * self.radius**2 * (math.cos(self.t0) - math.cos(self.t1))


def build_parallel_plates(side: float = 10e-3, separation: float = 1e-3) -> GeometrySet:
    """Two square plates in z = +-separation/2 (named top, bottom)."""
    h = 0.5 * side
    z = 0.5 * separation
    top = Rect((-h, -h, z), (side, 0.0, 0.0), (0.0, side, 0.0))
    bottom = Rect((-h, -h, -z), (side, 0.0, 0.0), (0.0, side, 0.0))
    return GeometrySet([Electrode("top", [top]), Electrode("bottom", [bottom])],
                       mirror_planes=[(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)],
                       meta={"kind": "plates"})


@dataclass(frozen=True)
class _RevolvedSegment:
    segment: Segment

    def area(self) -> float:
        return self.segment.area()


def revolve(geometry: GeometrySet) -> GeometrySet:
    """Turn an axisymmetric geometry into a 3D one (same electrodes)."""
    if not geometry.axisymmetric:
        raise GeometryError("geometry is not axisymmetric")
    els = []
    for e in geometry.electrodes:
        prims = []
        for p in e.primitives:
            if isinstance(p, Segment):
                prims.append(_RevolvedSegment(p))
            else:
                raise GeometryError("only straight generator segments can be revolved")
        els.append(Electrode(e.name, prims, axisymmetric=False))
    return GeometrySet(els, geometry.solids, geometry.mirror_planes, None, geometry.focus,
                       {**geometry.meta, "revolved": True})


# ---------------------------------------------------------------------------
# meshes


@dataclass
class PanelMesh:
    """Flat 3D panels (triangles or planar quadrilaterals)."""

    vertices: np.ndarray  # (n, 4, 3); triangles repeat nothing, use nvert
    nvert: np.ndarray  # (n,)
    electrode: np.ndarray  # (n,) electrode index
    names: list
    geometry: Optional[GeometrySet] = None
    settings: dict = field(default_factory=dict)

    kind = "3d"

    def __post_init__(self):
        v = self.vertices
        n = len(v)
        self.centroid = np.zeros((n, 3))
        self.normal = np.zeros((n, 3))
        self.area = np.zeros(n)
        self.diameter = np.zeros(n)
        self.edge_dir = np.zeros((n, 4, 3))
        self.edge_out = np.zeros((n, 4, 3))
        self.moment = np.zeros((n, 3, 3))
        for nv in (3, 4):
            idx = np.nonzero(self.nvert == nv)[0]
            if len(idx) == 0:
                continue
            P = v[idx, :nv]
            # area-weighted centroid from a fan of triangles
            a0 = P[:, 0]
            tot_a = np.zeros(len(idx))
            cen = np.zeros((len(idx), 3))
            nrm = np.zeros((len(idx), 3))
            for k in range(1, nv - 1):
                cr = np.cross(P[:, k] - a0, P[:, k + 1] - a0)
                ar = 0.5 * np.linalg.norm(cr, axis=1)
                nrm += cr
                cen += ar[:, None] * (a0 + P[:, k] + P[:, k + 1]) / 3.0
                tot_a += ar
            cen /= tot_a[:, None]
            nrm /= np.linalg.norm(nrm, axis=1)[:, None]
            self.centroid[idx] = cen
            self.normal[idx] = nrm
            self.area[idx] = tot_a
            diam = np.zeros(len(idx))
            for i in range(nv):
                for j in range(i + 1, nv):
                    diam = np.maximum(diam, np.linalg.norm(P[:, i] - P[:, j], axis=1))
            self.diameter[idx] = diam
            for i in range(nv):
                e = P[:, (i + 1) % nv] - P[:, i]
                e /= np.linalg.norm(e, axis=1)[:, None]
                self.edge_dir[idx, i] = e
                self.edge_out[idx, i] = np.cross(e, nrm)
            # second area moments about the centroid (exact for triangles)
            mom = np.zeros((len(idx), 3, 3))
            for k in range(1, nv - 1):
                tri = np.stack([a0, P[:, k], P[:, k + 1]], axis=1) - cen[:, None, :]
                ar = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
                s = tri.sum(axis=1)
                m = np.einsum("ni,nj->nij", s, s) + np.einsum("nki,nkj->nij", tri, tri)
                mom += (ar / 12.0)[:, None, None] * m
            self.moment[idx] = mom / tot_a[:, None, None]

    def __len__(self) -> int:
        return len(self.vertices)

    def content_hash(self) -> str:
        h = hashlib.sha256(b"panelmesh3d")
        for a in (self.vertices, self.nvert, self.electrode):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("|".join(self.names).encode())
        return h.hexdigest()

    def electrode_area(self) -> dict:
        return {n: float(self.area[self.electrode == i].sum()) for i, n in enumerate(self.names)}


@dataclass
class RingMesh:
    """Conical ring frusta between generator points p0=(r, z) and p1."""

    p0: np.ndarray
    p1: np.ndarray
    electrode: np.ndarray
    names: list
    geometry: Optional[GeometrySet] = None
    settings: dict = field(default_factory=dict)

    kind = "axisym"

    def __post_init__(self):
        self.mid = 0.5 * (self.p0 + self.p1)
        self.length = np.hypot(*(self.p1 - self.p0).T)
        self.area = np.pi * (self.p0[:, 0] + self.p1[:, 0]) * self.length
        self.diameter = self.length

    def __len__(self) -> int:
        return len(self.p0)

    @property
    def centroid(self) -> np.ndarray:
        return np.column_stack([self.mid[:, 0], np.zeros(len(self)), self.mid[:, 1]])

    @property
    def normal(self) -> np.ndarray:
        d = self.p1 - self.p0
        n = np.column_stack([d[:, 1], np.zeros(len(self)), -d[:, 0]])
        return n / np.linalg.norm(n, axis=1)[:, None]

    def content_hash(self) -> str:
        h = hashlib.sha256(b"ringmesh")
        for a in (self.p0, self.p1, self.electrode):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("|".join(self.names).encode())
        return h.hexdigest()

    def electrode_area(self) -> dict:
        return {n: float(self.area[self.electrode == i].sum()) for i, n in enumerate(self.names)}


# ---------------------------------------------------------------------------
# panelization


def _breakpoints(length: float, size_at) -> np.ndarray:
    """Parameter breakpoints in [0, 1] with local panel size <= size_at(s)."""
    n_fine = 4001
    s = np.linspace(0.0, 1.0, n_fine)
    h = size_at(s)
    dens = length / h
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
    n = max(1, int(math.ceil(cum[-1] - 1e-9)))
    if n == 1:
        return np.array([0.0, 1.0])
    targets = np.linspace(0.0, cum[-1], n + 1)
    bp = np.interp(targets, cum, s)
    bp[0], bp[-1] = 0.0, 1.0
    return bp


def _gap_size(d, target, refine):
    h_gap = target / refine
    return np.where(d < h_gap, h_gap, h_gap + (d - h_gap))


def _dist_to_segment(focus, a, b):
    """Distance from focus to segments a(s)->b(s) (arrays of endpoints)."""
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", focus - a, ab) / np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300), 0, 1)
    c = a + t[:, None] * ab
    return np.linalg.norm(focus - c, axis=1)


def _panelize_rect(r: Rect, target, refine, grading, focus):
    o, u, v = (np.asarray(x, dtype=float) for x in (r.origin, r.u, r.v))
    lu, lv = np.linalg.norm(u), np.linalg.norm(v)
    side = target / math.sqrt(2.0)
    f = np.asarray(focus, dtype=float)

    def size_u(s):
        a = o + s[:, None] * u
        d = _dist_to_segment(f, a, a + v)
        h = side + grading * d
        if refine > 1:
            if r.gap_edges[3]:
                h = np.minimum(h, _gap_size(s * lu, side, refine))
            if r.gap_edges[1]:
                h = np.minimum(h, _gap_size((1 - s) * lu, side, refine))
        return h

    def size_v(s):
        a = o + s[:, None] * v
        d = _dist_to_segment(f, a, a + u)
        h = side + grading * d
        if refine > 1:
            if r.gap_edges[0]:
                h = np.minimum(h, _gap_size(s * lv, side, refine))
            if r.gap_edges[2]:
                h = np.minimum(h, _gap_size((1 - s) * lv, side, refine))
        return h

    bu = _breakpoints(lu, size_u)
    bv = _breakpoints(lv, size_v)
    A, B = np.meshgrid(bu, bv, indexing="ij")
    P = o + A[..., None] * u + B[..., None] * v
    quads = np.stack([P[:-1, :-1], P[1:, :-1], P[1:, 1:], P[:-1, 1:]], axis=2)
    return quads.reshape(-1, 4, 3)


def _cube_sphere(center, radius, target):
    n = max(2, int(math.ceil(math.sqrt(2.0) * 0.5 * math.pi * radius / target)))
    g = np.linspace(-1.0, 1.0, n + 1)
    A, B = np.meshgrid(g, g, indexing="ij")
    tris = []
    c = np.asarray(center, dtype=float)
    for axis in range(3):
        for sign in (1.0, -1.0):
            pts = np.empty(A.shape + (3,))
            pts[..., axis] = sign
            pts[..., (axis + 1) % 3] = A if sign > 0 else B
            pts[..., (axis + 2) % 3] = B if sign > 0 else A
            pts /= np.linalg.norm(pts, axis=-1)[..., None]
            pts = c + radius * pts
            p00, p10 = pts[:-1, :-1], pts[1:, :-1]
            p11, p01 = pts[1:, 1:], pts[:-1, 1:]
            t1 = np.stack([p00, p10, p11], axis=2).reshape(-1, 3, 3)
            t2 = np.stack([p00, p11, p01], axis=2).reshape(-1, 3, 3)
            tris.extend([t1, t2])
    tris = np.concatenate(tris)
    out = np.zeros((len(tris), 4, 3))
    out[:, :3] = tris
    out[:, 3] = tris[:, 2]
    return out


def _panelize_segment(sg: Segment, target, refine, grading, focus_rz):
    L = sg.length()
    a = np.array([sg.r0, sg.z0])
    b = np.array([sg.r1, sg.z1])
    f = np.asarray(focus_rz, dtype=float)

    def size(s):
        p = a + s[:, None] * (b - a)
        h = target + grading * np.linalg.norm(p - f, axis=1)
        if refine > 1:
            if sg.gap0:
                h = np.minimum(h, _gap_size(s * L, target, refine))
            if sg.gap1:
                h = np.minimum(h, _gap_size((1 - s) * L, target, refine))
        return h

    bp = _breakpoints(L, size)
    pts = a + bp[:, None] * (b - a)
    return pts[:-1], pts[1:]


def _panelize_arc(arc: _ArcSegment, target):
    n = max(1, int(math.ceil(arc.radius * (arc.t1 - arc.t0) / target)))
    t = np.linspace(arc.t0, arc.t1, n + 1)
    # chord endpoints placed so each flat ring keeps the true zone area
    pts = np.column_stack([arc.radius * np.sin(t), arc.zc + arc.radius * np.cos(t)])
    return pts[:-1], pts[1:]


def _panelize_revolved(rs: _RevolvedSegment, target, refine, grading, focus):
    p0, p1 = _panelize_segment(rs.segment, target, refine, grading, (0.0, focus[2]))
    side = target / math.sqrt(2.0)
    quads = []
    for (r0, z0), (r1, z1) in zip(p0, p1):
        rmax = max(r0, r1)
        n = max(16, int(math.ceil(2 * math.pi * rmax / side)))
        n += n % 4  # keep the x and y mirror planes exact
        th = 2 * math.pi * np.arange(n + 1) / n
        c, s = np.cos(th), np.sin(th)
        a = np.column_stack([r0 * c[:-1], r0 * s[:-1], np.full(n, z0)])
        b = np.column_stack([r0 * c[1:], r0 * s[1:], np.full(n, z0)])
        cc = np.column_stack([r1 * c[1:], r1 * s[1:], np.full(n, z1)])
        d = np.column_stack([r1 * c[:-1], r1 * s[:-1], np.full(n, z1)])
        q = np.stack([a, b, cc, d], axis=1)
        if r0 == 0.0 or r1 == 0.0:
            # degenerate quad at the axis -> triangle
            keep = [1, 2, 3] if r0 == 0.0 else [0, 1, 2]
            t = q[:, keep]
            q = np.concatenate([t, t[:, 2:3]], axis=1)
            quads.append((q, 3))
        else:
            quads.append((q, 4))
    return quads


def panelize(geometry: GeometrySet, target_panel_size: float, gap_refinement: float = 1.0,
             grading: float = 0.0):
    """Discretize every electrode into panels of diameter <= target_panel_size.

    ``gap_refinement`` shrinks panels next to flagged gap edges by that
    factor; ``grading`` lets the panel size grow linearly with distance from
    the geometry focus (0 gives a uniform mesh).
    """
    _positive("target_panel_size", target_panel_size)
    if gap_refinement < 1:
        raise GeometryError("gap_refinement must be >= 1")
    if grading < 0:
        raise GeometryError("grading must be >= 0")
    settings = {"target_panel_size": float(target_panel_size), "gap_refinement": float(gap_refinement),
                "grading": float(grading)}
    focus = geometry.focus
    if geometry.axisymmetric:
        P0, P1, idx = [], [], []
        for i, e in enumerate(geometry.electrodes):
            for prim in e.primitives:
                if isinstance(prim, Segment):
                    a, b = _panelize_segment(prim, target_panel_size, gap_refinement, grading,
                                             (0.0, focus[2]))
                elif isinstance(prim, _ArcSegment):
                    a, b = _panelize_arc(prim, target_panel_size)
                else:
                    raise GeometryError(f"unsupported axisymmetric primitive {type(prim).__name__}")
                P0.append(a)
                P1.append(b)
                idx.append(np.full(len(a), i))
        return RingMesh(np.concatenate(P0), np.concatenate(P1), np.concatenate(idx),
                        geometry.names, geometry, settings)
    verts, nverts, idx = [], [], []
    for i, e in enumerate(geometry.electrodes):
        for prim in e.primitives:
            if isinstance(prim, Rect):
                q = _panelize_rect(prim, target_panel_size, gap_refinement, grading, focus)
                verts.append(q)
                nverts.append(np.full(len(q), 4))
                idx.append(np.full(len(q), i))
            elif isinstance(prim, SphereSurface):
                q = _cube_sphere(prim.center, prim.radius, target_panel_size)
                verts.append(q)
                nverts.append(np.full(len(q), 3))
                idx.append(np.full(len(q), i))
            elif isinstance(prim, _RevolvedSegment):
                for q, nv in _panelize_revolved(prim, target_panel_size, gap_refinement, grading, focus):
                    verts.append(q)
                    nverts.append(np.full(len(q), nv))
                    idx.append(np.full(len(q), i))
            else:
                raise GeometryError(f"unsupported primitive {type(prim).__name__}")
    return PanelMesh(np.concatenate(verts), np.concatenate(nverts), np.concatenate(idx),
                     geometry.names, geometry, settings)


def mesh_audit(mesh) -> dict:
    """Basic mesh quality numbers."""
    out = {
        "n_panels": len(mesh),
        "max_diameter": float(mesh.diameter.max()),
        "min_area": float(mesh.area.min()),
        "degenerate": int(np.sum(mesh.area <= 1e-30)),
        "area_by_electrode": mesh.electrode_area(),
    }
    if mesh.kind == "3d":
        # planarity of quads: distance of the 4th vertex from the plane
        q = mesh.nvert == 4
        if q.any():
            v = mesh.vertices[q]
            off = np.abs(np.einsum("ij,ij->i", v[:, 3] - v[:, 0], mesh.normal[q]))
            out["max_nonplanarity"] = float(off.max())
    return out


def symmetry_error(mesh, plane_normal: Sequence[float]) -> float:
    """Largest distance between a mirrored panel centroid and its nearest partner."""
    from scipy.spatial import cKDTree

    n = np.asarray(plane_normal, dtype=float)
    n = n / np.linalg.norm(n)
    c = mesh.centroid
    m = c - 2.0 * np.outer(c @ n, n)
    d, _ = cKDTree(c).query(m)
    return float(d.max())


def write_mesh_csv(mesh, path) -> None:
    """Debug dump: panel id, electrode, centroid, area, normal."""
    c, nrm = mesh.centroid, mesh.normal
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["panel_id", "electrode", "cx_m", "cy_m", "cz_m", "area_m2", "nx", "ny", "nz"])
        for i in range(len(mesh)):
            w.writerow([i, mesh.names[mesh.electrode[i]], *(f"{x:.12e}" for x in c[i]),
                        f"{mesh.area[i]:.12e}", *(f"{x:.12e}" for x in nrm[i])])
