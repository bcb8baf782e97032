"""Dense collocation boundary-element solver with per-electrode unit bases."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy.linalg import lapack, lu_factor, lu_solve

from ..constants import COULOMB_K
from . import _kernels as K

log = logging.getLogger(__name__)

CACHE_MAGIC = b"IONSBEM\x00"
CACHE_VERSION = 1


class SolverError(RuntimeError):
    """Field solve failed (singular or ill-conditioned system)."""


class DomainError(ValueError):
    """Evaluation point lies inside a conductor or outside the field domain."""


@dataclass(frozen=True)
class SolverSettings:
    far_factor_assembly: float = 6.0
    far_factor_eval: float = 10.0
    condition_limit: float = 1e12

    def key(self) -> str:
        return f"asm={self.far_factor_assembly!r};eval={self.far_factor_eval!r}"


def default_cache_dir() -> Path:
    env = os.environ.get("IONSRC_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ionsource"


def _gl_args():
    return (*K.GL2, *K.GL4, *K.GL8, *K.GL16)


class FieldBasis:
    """Unit-voltage surface charge densities for every electrode of a mesh.

    ``charges[:, i]`` is the charge density (C/m^2) that puts electrode i at
    1 V and every other electrode at 0 V. Potentials and fields of any
    voltage set follow by superposition.
    """

    def __init__(self, mesh, charges: np.ndarray, settings: SolverSettings, condition: float,
                 key: str):
        self.mesh = mesh
        self.names = list(mesh.names)
        charges = np.ascontiguousarray(charges, dtype=np.float64)
        charges.setflags(write=False)
        self.charges = charges
        self.settings = settings
        self.condition = float(condition)
        self.key = key
        self.geometry = mesh.geometry

    @property
    def axisymmetric(self) -> bool:
        return self.mesh.kind == "axisym"

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown electrode {name!r}") from None

    def voltage_array(self, voltages: Mapping[str, float]) -> np.ndarray:
        v = np.zeros(len(self.names))
        for name, val in voltages.items():
            v[self.index(name)] = float(val)
        return v

    def weights(self, channels) -> np.ndarray:
        """(n_electrodes, n_channels) matrix from a list of voltage mappings."""
        return np.column_stack([self.voltage_array(c) for c in channels])

    def _check_domain(self, pts: np.ndarray) -> None:
        if self.geometry is not None and self.geometry.solids:
            inside = self.geometry.inside_conductor(pts)
            if inside.any():
                i = int(np.argmax(inside))
                raise DomainError(f"point {pts[i].tolist()} lies inside a conductor")

    def evaluate(self, points, weights: np.ndarray, far_factor: Optional[float] = None,
                 check: bool = True):
        """Potentials (npts, nch) and fields (npts, nch, 3) for channel weights."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if check:
            self._check_domain(pts)
        q = np.ascontiguousarray(self.charges @ np.asarray(weights, dtype=np.float64).reshape(len(self.names), -1))
        m = self.mesh
        if m.kind == "axisym":
            r = np.hypot(pts[:, 0], pts[:, 1])
            rz = np.ascontiguousarray(np.column_stack([r, pts[:, 2]]))
            phi, er, ez = K.eval_axisym(rz, q, m.p0, m.p1, *_gl_args())
            with np.errstate(invalid="ignore", divide="ignore"):
                cx = np.where(r > 0, pts[:, 0] / np.where(r > 0, r, 1.0), 0.0)
                cy = np.where(r > 0, pts[:, 1] / np.where(r > 0, r, 1.0), 0.0)
            E = np.stack([er * cx[:, None], er * cy[:, None], ez], axis=-1)
        else:
            ff = self.settings.far_factor_eval if far_factor is None else far_factor
            phi, E = K.eval_3d(pts, q, m.centroid, m.vertices, m.nvert, m.normal, m.edge_dir,
                               m.edge_out, m.area, m.moment, m.diameter, float(ff))
        return phi * COULOMB_K, E * COULOMB_K

    def potential(self, points, voltages: Mapping[str, float]) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        phi, _ = self.evaluate(pts, self.voltage_array(voltages)[:, None])
        out = phi[:, 0]
        return out[0] if pts.ndim == 1 else out

    def efield(self, points, voltages: Mapping[str, float]) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        _, E = self.evaluate(pts, self.voltage_array(voltages)[:, None])
        out = E[:, 0, :]
        return out[0] if pts.ndim == 1 else out

    def panel_charges(self) -> np.ndarray:
        """Total charge per panel (C) for each unit basis, (npan, nel)."""
        return self.charges * self.mesh.area[:, None]

    def capacitance_matrix(self) -> np.ndarray:
        """C[i, j]: charge on electrode i when electrode j is at 1 V."""
        Q = self.panel_charges()
        n = len(self.names)
        C = np.zeros((n, n))
        for i in range(n):
            C[i] = Q[self.mesh.electrode == i].sum(axis=0)
        return C


def _assemble(mesh, settings: SolverSettings) -> np.ndarray:
    if mesh.kind == "axisym":
        A = K.assemble_axisym(mesh.mid, mesh.p0, mesh.p1, *_gl_args())
    else:
        A = K.assemble_3d(mesh.centroid, mesh.vertices, mesh.nvert, mesh.normal, mesh.edge_dir,
                          mesh.edge_out, mesh.area, mesh.moment, mesh.diameter,
                          float(settings.far_factor_assembly))
    return A * COULOMB_K


def basis_key(mesh, settings: SolverSettings) -> str:
    h = hashlib.sha256()
    h.update(mesh.content_hash().encode())
    h.update(settings.key().encode())
    h.update(f"v{CACHE_VERSION}".encode())
    return h.hexdigest()


def _cache_path(cache_dir, key: str) -> Path:
    return Path(cache_dir) / f"basis-{key[:32]}.bin"


def write_cache(path, key: str, charges: np.ndarray, condition: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npan, nel = charges.shape
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        fh.write(bytes.fromhex(key))
        fh.write(struct.pack("<QQd", npan, nel, condition))
        for i in range(nel):
            fh.write(np.ascontiguousarray(charges[:, i], dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_cache(path, key: str):
    """Return (charges, condition) or None if absent or stale."""
    path = Path(path)
    if not path.exists():
        return None
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            return None
        (ver,) = struct.unpack("<I", fh.read(4))
        if ver != CACHE_VERSION or fh.read(32) != bytes.fromhex(key):
            return None
        npan, nel, cond = struct.unpack("<QQd", fh.read(24))
        data = np.frombuffer(fh.read(8 * npan * nel), dtype="<f8")
    if data.size != npan * nel:
        return None
    return data.reshape(nel, npan).T.astype(np.float64), cond


def solve_basis(mesh, settings: Optional[SolverSettings] = None, cache_dir=None,
                use_cache: bool = True) -> FieldBasis:
    """Solve for one unit-voltage charge distribution per electrode.

    With ``use_cache`` the charges are read from / written to ``cache_dir``
    (default ``~/.cache/ionsource``), keyed by a hash of the mesh and
    solver settings.
    """
    settings = settings or SolverSettings()
    if len(mesh) == 0:
        raise SolverError("empty mesh")
    key = basis_key(mesh, settings)
    path = _cache_path(cache_dir or default_cache_dir(), key)
    if use_cache:
        hit = read_cache(path, key)
        if hit is not None:
            log.info("basis cache hit %s", path)
            return FieldBasis(mesh, hit[0], settings, hit[1], key)
    A = _assemble(mesh, settings)
    if not np.all(np.isfinite(A)):
        raise SolverError("non-finite influence coefficients (degenerate panels?)")
    anorm = np.abs(A).sum(axis=0).max()
    lu, piv = lu_factor(A, overwrite_a=True, check_finite=False)
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    condition = np.inf if rcond == 0 else 1.0 / rcond
    if info != 0 or not condition < settings.condition_limit:
        raise SolverError(f"ill-conditioned BEM system: condition estimate {condition:.3e} "
                          f"exceeds {settings.condition_limit:.1e}")
    rhs = np.zeros((len(mesh), len(mesh.names)))
    rhs[np.arange(len(mesh)), mesh.electrode] = 1.0
    charges = lu_solve((lu, piv), rhs, check_finite=False)
    if use_cache:
        try:
            write_cache(path, key, charges, condition)
        except OSError as exc:  # read-only cache dir is not fatal
            log.warning("could not write basis cache: %s", exc)
        # re-read so a cold solve and a cache hit give bit-identical numbers
        charges = read_cache(path, key)[0] if path.exists() else charges
    return FieldBasis(mesh, charges, settings, condition, key)


def boundary_residual(basis: FieldBasis, n_per_panel: int = 1, seed: int = 0) -> float:
    """Max |phi - prescribed| (V) at random off-collocation surface points.

    Each electrode is driven at 1 V in turn; points are drawn inside panels
    away from the collocation centroid.
    """
    rng = np.random.default_rng(seed)
    m = basis.mesh
    worst = 0.0
    if m.kind == "axisym":
        t = rng.uniform(0.15, 0.35, size=len(m)) * rng.choice([-1, 1], size=len(m)) + 0.5
        rz = m.p0 + t[:, None] * (m.p1 - m.p0)
        pts = np.column_stack([rz[:, 0], np.zeros(len(m)), rz[:, 1]])
    else:
        a = rng.uniform(0.2, 0.8, size=len(m))
        b = rng.uniform(0.2, 0.8, size=len(m))
        v = m.vertices
        tri = m.nvert == 3
        a = np.where(tri, a * 0.5, a)
        b = np.where(tri, b * 0.5, b)
        pts = v[:, 0] + a[:, None] * (v[:, 1] - v[:, 0]) + b[:, None] * (v[:, 3] - v[:, 0])
        pts = np.where(tri[:, None], (v[:, 0] + v[:, 1] + v[:, 2]) / 3.0
                       + 0.5 * (a - 0.25)[:, None] * (v[:, 1] - v[:, 0]), pts)
    W = np.eye(len(basis.names))
    phi, _ = basis.evaluate(pts, W, check=False)
    target = W[m.electrode]
    worst = float(np.abs(phi - target).max())
    return worst


@dataclass
class AxisProfile:
    z: np.ndarray
    potential: np.ndarray

    @property
    def peak(self) -> float:
        """Potential of largest magnitude (signed)."""
        return float(self.potential[np.argmax(np.abs(self.potential))])

    @property
    def peak_z(self) -> float:
        return float(self.z[np.argmax(np.abs(self.potential))])

    def samples(self) -> list:
        return list(zip(self.z.tolist(), self.potential.tolist()))


def on_axis_profile(basis: FieldBasis, voltages: Mapping[str, float], z_range, n_samples: int = 401) -> AxisProfile:
    """Potential sampled along the z axis between ``z_range``."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    z = np.linspace(float(z_range[0]), float(z_range[1]), int(n_samples))
    pts = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    return AxisProfile(z, np.asarray(basis.potential(pts, voltages), dtype=float))
