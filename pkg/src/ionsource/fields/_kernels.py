"""Compiled single-layer kernels.

All kernels work with unit surface charge density and omit the 1/(4 pi eps0)
prefactor; callers scale.

3D panels: closed-form potential and field of a uniformly charged flat
polygon (Wilton-type edge sums). Axisymmetric panels: conical frusta
integrated with Gauss-Legendre rules over the ring kernel (complete elliptic
integrals via the AGM), with a square-root substitution about the closest
point for near and self interactions.
"""

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi


def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w  # nodes/weights on [0, 1]


GL2 = _gauss(2)
GL4 = _gauss(4)
GL8 = _gauss(8)
GL16 = _gauss(16)


# ---------------------------------------------------------------------------
# 3D flat polygons


@njit(cache=True)
def poly_potential(px, py, pz, V, nv, n, ldir, uout):
    """Integral of 1/R over the polygon."""
    d = (px - V[0, 0]) * n[0] + (py - V[0, 1]) * n[1] + (pz - V[0, 2]) * n[2]
    ad = abs(d)
    qx = px - d * n[0]
    qy = py - d * n[1]
    qz = pz - d * n[2]
    acc = 0.0
    om = 0.0
    for i in range(nv):
        j = (i + 1) % nv
        ax = V[i, 0] - qx
        ay = V[i, 1] - qy
        az = V[i, 2] - qz
        bx = V[j, 0] - qx
        by = V[j, 1] - qy
        bz = V[j, 2] - qz
        p0 = ax * uout[i, 0] + ay * uout[i, 1] + az * uout[i, 2]
        lm = ax * ldir[i, 0] + ay * ldir[i, 1] + az * ldir[i, 2]
        lp = bx * ldir[i, 0] + by * ldir[i, 1] + bz * ldir[i, 2]
        r0sq = p0 * p0 + d * d
        rm = math.sqrt(lm * lm + r0sq)
        rp = math.sqrt(lp * lp + r0sq)
        if abs(p0) > 0.0:
            if lp + lm >= 0.0:
                num = rp + lp
                den = rm + lm
            else:
                num = rm - lm
                den = rp - lp
            if num > 0.0 and den > 0.0:
                acc += p0 * math.log(num / den)
            if ad > 0.0:
                om += math.atan(p0 * lp / (r0sq + ad * rp)) - math.atan(p0 * lm / (r0sq + ad * rm))
    return acc - ad * om


@njit(cache=True)
def poly_potential_field(px, py, pz, V, nv, n, ldir, uout):
    """(integral 1/R, integral (P - r')/R^3) over the polygon."""
    d = (px - V[0, 0]) * n[0] + (py - V[0, 1]) * n[1] + (pz - V[0, 2]) * n[2]
    ad = abs(d)
    qx = px - d * n[0]
    qy = py - d * n[1]
    qz = pz - d * n[2]
    acc = 0.0
    om = 0.0
    jx = 0.0
    jy = 0.0
    jz = 0.0
    for i in range(nv):
        j = (i + 1) % nv
        ax = V[i, 0] - qx
        ay = V[i, 1] - qy
        az = V[i, 2] - qz
        bx = V[j, 0] - qx
        by = V[j, 1] - qy
        bz = V[j, 2] - qz
        p0 = ax * uout[i, 0] + ay * uout[i, 1] + az * uout[i, 2]
        lm = ax * ldir[i, 0] + ay * ldir[i, 1] + az * ldir[i, 2]
        lp = bx * ldir[i, 0] + by * ldir[i, 1] + bz * ldir[i, 2]
        r0sq = p0 * p0 + d * d
        rm = math.sqrt(lm * lm + r0sq)
        rp = math.sqrt(lp * lp + r0sq)
        if lp + lm >= 0.0:
            num = rp + lp
            den = rm + lm
        else:
            num = rm - lm
            den = rp - lp
        L = 0.0
        if num > 0.0 and den > 0.0:
            L = math.log(num / den)
        acc += p0 * L
        jx += uout[i, 0] * L
        jy += uout[i, 1] * L
        jz += uout[i, 2] * L
        if ad > 0.0 and p0 != 0.0:
            om += math.atan(p0 * lp / (r0sq + ad * rp)) - math.atan(p0 * lm / (r0sq + ad * rm))
    pot = acc - ad * om
    if d > 0.0:
        jx += om * n[0]
        jy += om * n[1]
        jz += om * n[2]
    elif d < 0.0:
        jx -= om * n[0]
        jy -= om * n[1]
        jz -= om * n[2]
    return pot, jx, jy, jz


@njit(cache=True)
def far_potential_field(rx, ry, rz, area, M):
    """Monopole + quadrupole expansion about the panel centroid."""
    r2 = rx * rx + ry * ry + rz * rz
    r = math.sqrt(r2)
    inv3 = 1.0 / (r2 * r)
    inv5 = inv3 / r2
    mrx = M[0, 0] * rx + M[0, 1] * ry + M[0, 2] * rz
    mry = M[1, 0] * rx + M[1, 1] * ry + M[1, 2] * rz
    mrz = M[2, 0] * rx + M[2, 1] * ry + M[2, 2] * rz
    rmr = rx * mrx + ry * mry + rz * mrz
    tr = M[0, 0] + M[1, 1] + M[2, 2]
    pot = area * (1.0 / r + (3.0 * rmr - tr * r2) * 0.5 * inv5)
    # J = -grad(pot)
    c1 = inv3 + 7.5 * rmr * inv5 / r2 - 1.5 * tr * inv5
    c2 = -3.0 * inv5
    jx = area * (c1 * rx + c2 * mrx)
    jy = area * (c1 * ry + c2 * mry)
    jz = area * (c1 * rz + c2 * mrz)
    return pot, jx, jy, jz


@njit(cache=True)
def assemble_3d(cent, V, nvert, normal, ldir, uout, area, moment, diam, far_factor):
    n = cent.shape[0]
    A = np.empty((n, n))
    for i in range(n):
        px = cent[i, 0]
        py = cent[i, 1]
        pz = cent[i, 2]
        for j in range(n):
            rx = px - cent[j, 0]
            ry = py - cent[j, 1]
            rz = pz - cent[j, 2]
            dist = math.sqrt(rx * rx + ry * ry + rz * rz)
            if dist > far_factor * diam[j]:
                A[i, j] = far_potential_field(rx, ry, rz, area[j], moment[j])[0]
            else:
                A[i, j] = poly_potential(px, py, pz, V[j], nvert[j], normal[j], ldir[j], uout[j])
    return A


@njit(cache=True)
def eval_3d(points, q, cent, V, nvert, normal, ldir, uout, area, moment, diam, far_factor):
    """phi (npts, nch) and E (npts, nch, 3) for charge densities q (npan, nch)."""
    npts = points.shape[0]
    npan = cent.shape[0]
    nch = q.shape[1]
    phi = np.zeros((npts, nch))
    E = np.zeros((npts, nch, 3))
    for i in range(npts):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        for j in range(npan):
            rx = px - cent[j, 0]
            ry = py - cent[j, 1]
            rz = pz - cent[j, 2]
            dist = math.sqrt(rx * rx + ry * ry + rz * rz)
            if dist > far_factor * diam[j]:
                p, jx, jy, jz = far_potential_field(rx, ry, rz, area[j], moment[j])
            else:
                p, jx, jy, jz = poly_potential_field(px, py, pz, V[j], nvert[j], normal[j], ldir[j], uout[j])
            for c in range(nch):
                s = q[j, c]
                if s != 0.0:
                    phi[i, c] += s * p
                    E[i, c, 0] += s * jx
                    E[i, c, 1] += s * jy
                    E[i, c, 2] += s * jz
    return phi, E


# ---------------------------------------------------------------------------
# axisymmetric rings


@njit(cache=True)
def ellipke(m1):
    """Complete elliptic integrals K(m), E(m) given the complement m1 = 1 - m."""
    a = 1.0
    b = math.sqrt(m1)
    p = 0.5
    s = p * (1.0 - m1)
    for _ in range(60):
        c = 0.5 * (a - b)
        an = 0.5 * (a + b)
        b = math.sqrt(a * b)
        a = an
        p *= 2.0
        s += p * c * c
        if abs(c) <= 1e-16 * a:
            break
    K = 0.5 * math.pi / a
    return K, K * (1.0 - s)


@njit(cache=True)
def ring_kernel(r, z, a, zp):
    """Potential and field (E_r, E_z) of a ring with unit weight.

    Unit weight means phi = 4 K(m)/S, i.e. a ring of total charge 2 pi a
    (per unit 1/(4 pi eps0)) carrying unit line density.
    """
    dz = z - zp
    S2 = (r + a) * (r + a) + dz * dz
    Sm2 = (r - a) * (r - a) + dz * dz
    S = math.sqrt(S2)
    K, E = ellipke(Sm2 / S2)
    phi = 4.0 * K / S
    Ez = 4.0 * dz * E / (Sm2 * S)
    rho2 = a * a + dz * dz
    if r * r < 1e-4 * rho2:
        rho = math.sqrt(rho2)
        t = dz / rho
        t2 = t * t
        P2 = 0.5 * (3.0 * t2 - 1.0)
        P4 = (35.0 * t2 * t2 - 30.0 * t2 + 3.0) / 8.0
        P6 = (231.0 * t2 * t2 * t2 - 315.0 * t2 * t2 + 105.0 * t2 - 5.0) / 16.0
        h = 0.5 * r
        # f^(2k) = (2k)! P_2k / rho^(2k+1)
        f2 = 2.0 * P2 / (rho2 * rho)
        f4 = 24.0 * P4 / (rho2 * rho2 * rho)
        f6 = 720.0 * P6 / (rho2 * rho2 * rho2 * rho)
        Er = TWO_PI * (h * f2 - 2.0 * h * h * h * f4 / 4.0 + 3.0 * h ** 5 * f6 / 36.0)
    else:
        Er = 2.0 / (r * S) * (K - (a * a - r * r + dz * dz) / Sm2 * E)
    return phi, Er, Ez


@njit(cache=True)
def _closest_param(r, z, r0, z0, r1, z1):
    dr = r1 - r0
    dzs = z1 - z0
    L2 = dr * dr + dzs * dzs
    t = ((r - r0) * dr + (z - z0) * dzs) / L2
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    cr = r0 + t * dr - r
    cz = z0 + t * dzs - z
    return t, math.sqrt(cr * cr + cz * cz)


@njit(cache=True)
def ring_panel(r, z, r0, z0, r1, z1, want_field, x2, w2, x4, w4, x8, w8, x16, w16):
    """Integral of the ring kernel (weighted by a ds) over one frustum panel."""
    dr = r1 - r0
    dzs = z1 - z0
    L = math.sqrt(dr * dr + dzs * dzs)
    tc, dist = _closest_param(r, z, r0, z0, r1, z1)
    phi = 0.0
    er = 0.0
    ez = 0.0
    if dist < 2.0 * L:
        # split at the closest point, s = tc -+ u^2 on each side
        for side in range(2):
            span = tc if side == 0 else 1.0 - tc
            if span <= 0.0:
                continue
            umax = math.sqrt(span)
            for k in range(x16.shape[0]):
                u = umax * x16[k]
                ds = 2.0 * u * umax * w16[k]
                t = tc - u * u if side == 0 else tc + u * u
                a = r0 + t * dr
                zp = z0 + t * dzs
                wgt = a * ds * L
                p, fr, fz = ring_kernel(r, z, a, zp)
                phi += wgt * p
                if want_field:
                    er += wgt * fr
                    ez += wgt * fz
        return phi, er, ez
    if dist < 8.0 * L:
        xs = x8
        ws = w8
    elif dist < 30.0 * L:
        xs = x4
        ws = w4
    else:
        xs = x2
        ws = w2
    for k in range(xs.shape[0]):
        t = xs[k]
        a = r0 + t * dr
        zp = z0 + t * dzs
        wgt = a * ws[k] * L
        p, fr, fz = ring_kernel(r, z, a, zp)
        phi += wgt * p
        if want_field:
            er += wgt * fr
            ez += wgt * fz
    return phi, er, ez


@njit(cache=True)
def assemble_axisym(mid, p0, p1, x2, w2, x4, w4, x8, w8, x16, w16):
    n = mid.shape[0]
    A = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            A[i, j] = ring_panel(mid[i, 0], mid[i, 1], p0[j, 0], p0[j, 1], p1[j, 0], p1[j, 1], False,
                                 x2, w2, x4, w4, x8, w8, x16, w16)[0]
    return A


@njit(cache=True)
def eval_axisym(rz, q, p0, p1, x2, w2, x4, w4, x8, w8, x16, w16):
    npts = rz.shape[0]
    npan = p0.shape[0]
    nch = q.shape[1]
    phi = np.zeros((npts, nch))
    Er = np.zeros((npts, nch))
    Ez = np.zeros((npts, nch))
    for i in range(npts):
        for j in range(npan):
            p, fr, fz = ring_panel(rz[i, 0], rz[i, 1], p0[j, 0], p0[j, 1], p1[j, 0], p1[j, 1], True,
                                   x2, w2, x4, w4, x8, w8, x16, w16)
            for c in range(nch):
                s = q[j, c]
                if s != 0.0:
                    phi[i, c] += s * p
                    Er[i, c] += s * fr
                    Ez[i, c] += s * fz
    return phi, Er, Ez


@njit(cache=True)
def axis_derivatives(zs, nodes_a, nodes_z, nodes_w, nmax):
    """On-axis potential derivatives d^n phi/dz^n, n = 0..nmax.

    Each node is a point ring of radius a at z with weight w (charge
    density * a * ds); on the axis the ring contributes 2 pi w / rho and
    d^n/dz^n (1/rho) = (-1)^n n! P_n(t) / rho^(n+1), t = (z - z_node)/rho.
    """
    nz = zs.shape[0]
    nch = nodes_w.shape[1]
    out = np.zeros((nz, nch, nmax + 1))
    P = np.empty(nmax + 1)
    fact = np.empty(nmax + 1)
    fact[0] = 1.0
    for k in range(1, nmax + 1):
        fact[k] = fact[k - 1] * k
    for i in range(nz):
        for j in range(nodes_a.shape[0]):
            u = zs[i] - nodes_z[j]
            rho = math.sqrt(nodes_a[j] * nodes_a[j] + u * u)
            t = u / rho
            P[0] = 1.0
            if nmax >= 1:
                P[1] = t
            for k in range(1, nmax):
                P[k + 1] = ((2 * k + 1) * t * P[k] - k * P[k - 1]) / (k + 1)
            inv = 1.0 / rho
            pw = inv
            for k in range(nmax + 1):
                f = fact[k] * P[k] * pw
                if k % 2 == 1:
                    f = -f
                for c in range(nch):
                    out[i, c, k] += TWO_PI * nodes_w[j, c] * f
                pw *= inv
    return out
