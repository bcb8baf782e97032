"""Precomputed field representations used for trajectory tracking.

``FieldMap`` samples a 3D basis on nested regular grids (trilinear lookup);
``AxisSeries`` stores on-axis potential derivatives of an axisymmetric basis
and evaluates the off-axis expansion, whose field is the exact gradient of
the truncated potential series.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..constants import COULOMB_K
from . import _kernels as K
from .bem import FieldBasis, default_cache_dir

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    lower: tuple
    upper: tuple
    step: tuple

    def axes(self):
        out = []
        for lo, hi, h in zip(self.lower, self.upper, self.step):
            n = int(round((hi - lo) / h)) + 1
            out.append(lo + h * np.arange(n))
        return out

    def meta(self) -> np.ndarray:
        ax = self.axes()
        return np.array([self.lower[0], self.lower[1], self.lower[2], *self.step,
                         len(ax[0]), len(ax[1]), len(ax[2])], dtype=float)


class FieldMap:
    """Channels of (E, phi) sampled on a fine and a coarse grid.

    ``channels`` is a list of electrode groups; channel c at 1 V means all its
    electrodes at 1 V.
    """

    def __init__(self, channels, fine: GridSpec, coarse: GridSpec, G1: np.ndarray, G2: np.ndarray,
                 key: str = ""):
        self.channels = [list(c) for c in channels]
        self.fine = fine
        self.coarse = coarse
        self.G1 = G1
        self.G2 = G2
        self.key = key

    @property
    def z_max(self) -> float:
        return max(self.fine.upper[2], self.coarse.upper[2])

    @property
    def half_width(self) -> float:
        return min(-self.coarse.lower[0], self.coarse.upper[0], -self.coarse.lower[1], self.coarse.upper[1])

    def evaluate(self, points, volts) -> tuple:
        """Interpolated (E, phi) at points for channel voltages ``volts``."""
        from ..dynamics._core import field_at

        pts = np.atleast_2d(np.asarray(points, dtype=float))
        volts = np.asarray(volts, dtype=float)
        E = np.zeros((len(pts), 3))
        phi = np.zeros(len(pts))
        res = np.zeros(4)
        d = _dummies()
        for i, p in enumerate(pts):
            field_at(2, p[0], p[1], p[2], volts, d["qH"], d["qg"], self.G1, self.fine.meta(),
                     self.G2, self.coarse.meta(), d["D"], d["smeta"], d["rp"], d["rp"], d["rq"],
                     res, np.zeros(1), np.ones(1))
            E[i] = res[:3]
            phi[i] = res[3]
        return E, phi


def _dummies():
    return {
        "qH": np.zeros((1, 3, 3)), "qg": np.zeros((1, 3)),
        "G": np.zeros((2, 2, 2, 1, 4)), "gmeta": np.array([0, 0, 0, 1, 1, 1, 2, 2, 2], dtype=float),
        "D": np.zeros((1, 1, 1)), "smeta": np.zeros(4),
        "rp": np.zeros((1, 2)), "rq": np.zeros((1, 1)),
    }


def _sample(basis: FieldBasis, W: np.ndarray, spec: GridSpec, far_factor: float) -> np.ndarray:
    ax = spec.axes()
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    inside = basis.geometry.inside_conductor(pts) if basis.geometry is not None else np.zeros(len(pts), bool)
    phi = np.zeros((len(pts), W.shape[1]))
    E = np.zeros((len(pts), W.shape[1], 3))
    ok = ~inside
    p, e = basis.evaluate(pts[ok], W, far_factor=far_factor, check=False)
    phi[ok] = p
    E[ok] = e
    G = np.concatenate([E, phi[..., None]], axis=-1)
    return G.reshape(len(ax[0]), len(ax[1]), len(ax[2]), W.shape[1], 4)


def build_field_map(basis: FieldBasis, channels: Sequence[Sequence[str]], fine: GridSpec,
                    coarse: GridSpec, far_factor: float = 4.0, cache_dir=None,
                    use_cache: bool = True) -> FieldMap:
    """Sample the basis on two grids (cached on disk by content hash)."""
    h = hashlib.sha256()
    h.update(basis.key.encode())
    h.update(repr([list(c) for c in channels]).encode())
    h.update(repr((fine, coarse, far_factor)).encode())
    key = h.hexdigest()
    path = Path(cache_dir or default_cache_dir()) / f"fieldmap-{key[:32]}.npz"
    if use_cache and path.exists():
        with np.load(path) as z:
            if str(z["key"]) == key:
                return FieldMap(channels, fine, coarse, z["G1"], z["G2"], key)
    W = basis.weights([{n: 1.0 for n in c} for c in channels])
    G1 = _sample(basis, W, fine, far_factor)
    G2 = _sample(basis, W, coarse, far_factor)
    if use_cache:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp.npz")
            np.savez(tmp, G1=G1, G2=G2, key=key)
            tmp.replace(path)
        except OSError as exc:
            log.warning("could not write field map cache: %s", exc)
    return FieldMap(channels, fine, coarse, G1, G2, key)


class AxisSeries:
    """On-axis derivative tables of an axisymmetric basis, per channel."""

    def __init__(self, basis: FieldBasis, channels: Sequence[Sequence[str]], z_range: tuple,
                 dz: float = 5e-6, order: int = 24, taylor_terms: int = 10,
                 series_radius: Optional[float] = None, nodes: int = 8, cache_dir=None,
                 use_cache: bool = False):
        if basis.mesh.kind != "axisym":
            raise ValueError("AxisSeries needs an axisymmetric basis")
        self.basis = basis
        self.channels = [list(c) for c in channels]
        self.z0, self.z1 = float(z_range[0]), float(z_range[1])
        self.dz = float(dz)
        self.order = int(order)
        self.taylor_terms = int(taylor_terms)
        m = basis.mesh
        bore = float(np.min(np.minimum(m.p0[:, 0], m.p1[:, 0])))
        self.series_radius = float(series_radius if series_radius is not None else 0.5 * bore)
        W = basis.weights([{n: 1.0 for n in c} for c in channels])
        q = basis.charges @ W  # (npan, nch)
        x, w = np.polynomial.legendre.leggauss(nodes)
        t = 0.5 * (x + 1.0)
        w = 0.5 * w
        a = m.p0[:, None, 0] + t[None, :] * (m.p1[:, None, 0] - m.p0[:, None, 0])
        zn = m.p0[:, None, 1] + t[None, :] * (m.p1[:, None, 1] - m.p0[:, None, 1])
        wn = (a * w[None, :] * m.length[:, None])[..., None] * q[:, None, :]
        self.nodes_a = a.ravel()
        self.nodes_z = zn.ravel()
        self.nodes_w = wn.reshape(-1, q.shape[1]) * COULOMB_K
        nz = int(math.ceil((self.z1 - self.z0) / self.dz)) + 1
        self.zs = self.z0 + self.dz * np.arange(nz)
        h = hashlib.sha256()
        h.update(basis.key.encode())
        h.update(repr((self.channels, self.z0, self.z1, self.dz, self.order, nodes)).encode())
        self.key = h.hexdigest()
        path = Path(cache_dir or default_cache_dir()) / f"axis-{self.key[:32]}.npy"
        D = None
        if use_cache and path.exists():
            D = np.load(path)
            if D.shape != (nz, len(self.channels), self.order + 1):
                D = None
        if D is None:
            D = K.axis_derivatives(self.zs, self.nodes_a, self.nodes_z, self.nodes_w, self.order)
            if use_cache:
                try:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_name(path.name + ".tmp.npy")
                    np.save(tmp, D)
                    tmp.replace(path)
                except OSError as exc:
                    log.warning("could not write axis series cache: %s", exc)
        self.D = D
        self.ring_p0 = np.ascontiguousarray(m.p0)
        self.ring_p1 = np.ascontiguousarray(m.p1)
        self.ring_q = np.ascontiguousarray(q)

    def smeta(self) -> np.ndarray:
        return np.array([self.z0, self.dz, self.series_radius, self.taylor_terms], dtype=float)

    def axis_potential(self, z, volts) -> np.ndarray:
        """Exact on-axis potential (direct node sum)."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        d = K.axis_derivatives(z, self.nodes_a, self.nodes_z, self.nodes_w, 0)
        return d[:, :, 0] @ np.asarray(volts, dtype=float)

    def evaluate(self, points, volts) -> tuple:
        from ..dynamics._core import field_at

        pts = np.atleast_2d(np.asarray(points, dtype=float))
        volts = np.asarray(volts, dtype=float)
        E = np.zeros((len(pts), 3))
        phi = np.zeros(len(pts))
        res = np.zeros(4)
        d = _dummies()
        work = np.zeros(self.D.shape[2])
        fact = _factorials(self.D.shape[2])
        for i, p in enumerate(pts):
            field_at(3, p[0], p[1], p[2], volts, d["qH"], d["qg"], d["G"], d["gmeta"], d["G"],
                     d["gmeta"], self.D, self.smeta(), self.ring_p0, self.ring_p1, self.ring_q,
                     res, work, fact)
            E[i] = res[:3]
            phi[i] = res[3]
        return E, phi


def _factorials(n: int) -> np.ndarray:
    return np.array([math.factorial(k) for k in range(n + 1)], dtype=float)
