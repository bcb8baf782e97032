"""Compiled Dormand-Prince 5(4) integrator for a few interacting ions.

Every shot is integrated on its own adaptive step sequence, so results do not
depend on how shots are batched or distributed over workers.

Field sources (``kind``):
    0  no external field
    1  quadratic channels  phi_c = 0.5 r.H_c.r + g_c.r
    2  nested trilinear grids (fine, coarse) of (E, phi) per channel
    3  on-axis series of an axisymmetric field, direct ring sum off the
       series radius
"""

import math

import numpy as np
from numba import njit

from ..constants import COULOMB_K, E_CHARGE
from ..fields._kernels import ring_panel

# status codes
ACTIVE = 0
EXITED = 1
REFLECTED = 2
STRUCK = 3
LATERAL = 4
TIMEOUT = 5
STIFF = 6

A21 = 0.2
A31, A32 = 0.075, 0.225
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = 9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0
B1, B3, B4, B5, B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
C2, C3, C4, C5 = 0.2, 0.3, 0.8, 8.0 / 9.0
E1, E3, E4, E5, E6, E7 = (-71.0 / 57600.0, 71.0 / 16695.0, -71.0 / 1920.0, 17253.0 / 339200.0,
                          -22.0 / 525.0, 1.0 / 40.0)
DENSE_P = np.array([
    [1.0, -2.8535800653862835, 3.0717434641059005, -1.1270175653862835],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 4.023133379230305, -6.249321565289, 2.675424484351598],
    [0.0, -3.7324019615885042, 10.068970589843675, -5.685526961588504],
    [0.0, 2.5548038301849423, -6.399112377351017, 3.5219323679207912],
    [0.0, -1.3744241142186024, 3.272657752246729, -1.7672812570757455],
    [0.0, 1.3824689317781436, -3.764937863556287, 2.382468931778144],
])

KE2 = COULOMB_K * E_CHARGE

# Gauss-Legendre rules on [0, 1] for the direct ring fallback
GL = (
    np.array([0.21132486540518713, 0.7886751345948129]), np.array([0.5, 0.5]),
    np.polynomial.legendre.leggauss(4)[0] * 0.5 + 0.5, np.polynomial.legendre.leggauss(4)[1] * 0.5,
    np.polynomial.legendre.leggauss(8)[0] * 0.5 + 0.5, np.polynomial.legendre.leggauss(8)[1] * 0.5,
    np.polynomial.legendre.leggauss(16)[0] * 0.5 + 0.5, np.polynomial.legendre.leggauss(16)[1] * 0.5,
)



@njit(cache=True)
def channel_voltages(t, dc, amp, om, ph, off, et, ev, er, out):
    for c in range(dc.shape[0]):
        v = dc[c]
        for k in range(off[c], off[c + 1]):
            t0 = et[k]
            if t >= t0 + er[k]:
                v = ev[k]
            elif t > t0:
                v = v + (ev[k] - v) * (t - t0) / er[k]
            else:
                break
        if amp[c] != 0.0:
            v += amp[c] * math.cos(om[c] * t + ph[c])
        out[c] = v


@njit(cache=True)
def _grid_eval(G, meta, x, y, z, volts, res):
    """Trilinear E and phi from grid G (nx, ny, nz, nch, 4); False if outside."""
    fx = (x - meta[0]) / meta[3]
    fy = (y - meta[1]) / meta[4]
    fz = (z - meta[2]) / meta[5]
    nx = G.shape[0]
    ny = G.shape[1]
    nz = G.shape[2]
    if fx < 0.0 or fy < 0.0 or fz < 0.0 or fx > nx - 1 or fy > ny - 1 or fz > nz - 1:
        return False
    i = min(int(fx), nx - 2)
    j = min(int(fy), ny - 2)
    k = min(int(fz), nz - 2)
    tx = fx - i
    ty = fy - j
    tz = fz - k
    for q in range(4):
        res[q] = 0.0
    nch = G.shape[3]
    for di in range(2):
        wx = tx if di else 1.0 - tx
        for dj in range(2):
            wy = ty if dj else 1.0 - ty
            for dk in range(2):
                w = wx * wy * (tz if dk else 1.0 - tz)
                if w == 0.0:
                    continue
                for c in range(nch):
                    wc = w * volts[c]
                    if wc != 0.0:
                        for q in range(4):
                            res[q] += wc * G[i + di, j + dj, k + dk, c, q]
    return True


@njit(cache=True)
def _series_eval(D, smeta, rp0, rp1, rq, x, y, z, volts, res, work, fact):
    """Off-axis expansion of an axisymmetric field from on-axis derivatives."""
    z0 = smeta[0]
    hz = smeta[1]
    nz = D.shape[0]
    nd = D.shape[2]
    rmax = smeta[2]
    ntaylor = int(smeta[3])
    for q in range(4):
        res[q] = 0.0
    fi = (z - z0) / hz
    r2 = x * x + y * y
    nch = D.shape[1]
    if r2 > rmax * rmax or fi < -0.5 or fi > nz - 0.5:
        # direct ring sum
        r = math.sqrt(r2)
        phi = 0.0
        er = 0.0
        if rp0.shape[0] == 0:
            return False
        ez = 0.0
        for j in range(rp0.shape[0]):
            s = 0.0
            for c in range(nch):
                s += volts[c] * rq[j, c]
            if s == 0.0:
                continue
            p, fr, fz = ring_panel(r, z, rp0[j, 0], rp0[j, 1], rp1[j, 0], rp1[j, 1], True,
                                   GL[0], GL[1], GL[2], GL[3], GL[4], GL[5], GL[6], GL[7])
            phi += s * p
            er += s * fr
            ez += s * fz
        phi *= COULOMB_K
        er *= COULOMB_K
        ez *= COULOMB_K
        if r > 0.0:
            res[0] = er * x / r
            res[1] = er * y / r
        res[2] = ez
        res[3] = phi
        return True
    i = int(fi + 0.5)
    if i > nz - 1:
        i = nz - 1
    d = z - (z0 + i * hz)
    # combined derivative table at node i, then Taylor shift to z
    for n in range(nd):
        s = 0.0
        for c in range(nch):
            s += volts[c] * D[i, c, n]
        work[n] = s
    u = 0.25 * r2
    phi = 0.0
    dphidz = 0.0
    dphidr2 = 0.0
    upow = 1.0
    kmax = (nd - 2) // 2
    for k in range(kmax + 1):
        n0 = 2 * k
        # V^(2k)(z) and V^(2k+1)(z)
        v0 = 0.0
        v1 = 0.0
        dp = 1.0
        for m in range(ntaylor + 1):
            if n0 + 1 + m >= nd:
                break
            v0 += work[n0 + m] * dp
            v1 += work[n0 + 1 + m] * dp
            dp *= d / (m + 1)
        c0 = upow / (fact[k] * fact[k])
        if k % 2 == 1:
            c0 = -c0
        t0 = c0 * v0
        phi += t0
        dphidz += c0 * v1
        if k >= 1 and r2 > 0.0:
            dphidr2 += t0 * k / r2
        if k >= 2 and abs(t0) <= 1e-17 * abs(phi) and abs(c0 * v1) <= 1e-17 * abs(dphidz) + 1e-300:
            break
        upow *= u
    if r2 == 0.0:
        # limit of k * u^(k-1)/4 for k = 1
        v2 = 0.0
        dp = 1.0
        for m in range(ntaylor + 1):
            if 2 + m >= nd:
                break
            v2 += work[2 + m] * dp
            dp *= d / (m + 1)
        dphidr2 = -0.25 * v2
    res[0] = -2.0 * x * dphidr2
    res[1] = -2.0 * y * dphidr2
    res[2] = -dphidz
    res[3] = phi
    return True




@njit(cache=True)
def field_at(kind, x, y, z, volts, qH, qg, G1, m1, G2, m2, D, smeta, rp0, rp1, rq, res, work, fact):
    """Fill res = (Ex, Ey, Ez, phi); return False outside the source data."""
    if kind == 0:
        for q in range(4):
            res[q] = 0.0
        return True
    if kind == 1:
        ex = 0.0
        ey = 0.0
        ez = 0.0
        phi = 0.0
        for c in range(qH.shape[0]):
            v = volts[c]
            if v == 0.0:
                continue
            hx = qH[c, 0, 0] * x + qH[c, 0, 1] * y + qH[c, 0, 2] * z + qg[c, 0]
            hy = qH[c, 1, 0] * x + qH[c, 1, 1] * y + qH[c, 1, 2] * z + qg[c, 1]
            hz = qH[c, 2, 0] * x + qH[c, 2, 1] * y + qH[c, 2, 2] * z + qg[c, 2]
            ex -= v * hx
            ey -= v * hy
            ez -= v * hz
            phi += v * (0.5 * (x * (hx + qg[c, 0]) + y * (hy + qg[c, 1]) + z * (hz + qg[c, 2])))
        res[0] = ex
        res[1] = ey
        res[2] = ez
        res[3] = phi
        return True
    if kind == 2:
        if _grid_eval(G1, m1, x, y, z, volts, res):
            return True
        if _grid_eval(G2, m2, x, y, z, volts, res):
            return True
        for q in range(4):
            res[q] = 0.0
        return False
    return _series_eval(D, smeta, rp0, rp1, rq, x, y, z, volts, res, work, fact)


@njit(cache=True)
def _deriv(t, y, dydt, n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact):
    dc, amp, om, ph, off, et, ev, er = prog
    qH, qg, G1, m1, G2, m2, D, smeta, rp0, rp1, rq = fsrc
    channel_voltages(t, dc, amp, om, ph, off, et, ev, er, volts)
    for i in range(n):
        b = 6 * i
        if not active[i]:
            for q in range(6):
                dydt[b + q] = 0.0
            continue
        dydt[b] = y[b + 3]
        dydt[b + 1] = y[b + 4]
        dydt[b + 2] = y[b + 5]
        field_at(kind, y[b], y[b + 1], y[b + 2], volts, qH, qg, G1, m1, G2, m2, D, smeta,
                 rp0, rp1, rq, res, work, fact)
        ax = qm[i] * res[0]
        ay = qm[i] * res[1]
        az = qm[i] * res[2]
        if coulomb:
            for j in range(n):
                if j == i or not active[j]:
                    continue
                c = 6 * j
                dx = y[b] - y[c]
                dy = y[b + 1] - y[c + 1]
                dz = y[b + 2] - y[c + 2]
                r2 = dx * dx + dy * dy + dz * dz
                f = KE2 * qq[j] * qm[i] / (r2 * math.sqrt(r2))
                ax += f * dx
                ay += f * dy
                az += f * dz
        dydt[b + 3] = ax
        dydt[b + 4] = ay
        dydt[b + 5] = az


@njit(cache=True)
def _dense(y, K, h, theta, P, out, i0, i1):
    """Dense output of components i0..i1-1 at fraction theta of the step."""
    t1 = theta
    t2 = t1 * theta
    t3 = t2 * theta
    t4 = t3 * theta
    for c in range(i0, i1):
        s = 0.0
        for st in range(7):
            kk = K[st, c]
            if kk != 0.0:
                s += kk * (P[st, 0] * t1 + P[st, 1] * t2 + P[st, 2] * t3 + P[st, 3] * t4)
        out[c - i0] = y[c] + h * s


@njit(cache=True)
def _inside_solid(x, y, z, boxes, annuli):
    for b in range(boxes.shape[0]):
        inside = True
        for a in range(3):
            c = ((x - boxes[b, 0]) * boxes[b, 3 + 3 * a] + (y - boxes[b, 1]) * boxes[b, 4 + 3 * a]
                 + (z - boxes[b, 2]) * boxes[b, 5 + 3 * a])
            if abs(c) > boxes[b, 12 + a]:
                inside = False
                break
        if inside:
            return True
    for b in range(annuli.shape[0]):
        if annuli[b, 2] <= z <= annuli[b, 3]:
            r2 = x * x + y * y
            if annuli[b, 0] ** 2 <= r2 <= annuli[b, 1] ** 2:
                return True
    return False


@njit(cache=True)
def _event_value(kind, s, zval):
    """Signed event function on a 6-vector s; event when it turns >= 0."""
    if kind == 0:  # exit plane
        return s[2] - zval
    if kind == 1:  # entry plane, backwards
        return zval - s[2]
    if kind == 2:  # lateral radius
        return s[0] * s[0] + s[1] * s[1] - zval * zval
    if kind == 3:  # turnaround
        return -s[5]
    return s[2] - zval  # 4: plane crossing forward


@njit(cache=True)
def _locate(y, K, h, P, b, kind, zval, tol_theta, boxes, annuli, buf, lo=0.0, hi=1.0):
    """Bisection in theta for the first root of an event on ion at offset b."""
    while (hi - lo) > tol_theta:
        mid = 0.5 * (lo + hi)
        _dense(y, K, h, mid, P, buf, b, b + 6)
        if kind == 5:
            hit = _inside_solid(buf[0], buf[1], buf[2], boxes, annuli)
        else:
            hit = _event_value(kind, buf, zval) >= 0.0
        if hit:
            hi = mid
        else:
            lo = mid
    return hi


@njit(cache=True)
def _thinnest_solid(boxes, annuli):
    s = np.inf
    for b in range(boxes.shape[0]):
        for a in range(3):
            s = min(s, 2.0 * boxes[b, 12 + a])
    for b in range(annuli.shape[0]):
        s = min(s, annuli[b, 1] - annuli[b, 0], annuli[b, 3] - annuli[b, 2])
    return s


@njit(cache=True)
def _impact_theta(y, ynew, K, h, P, b, smin, tol_theta, boxes, annuli, buf):
    """First theta at which the step path enters a solid, or 2.0.

    The path is sampled at spacings below half the thinnest solid so a long
    field-free step cannot jump over a wall.
    """
    if not np.isfinite(smin):
        return 2.0
    d2 = 0.0
    for q in range(3):
        d2 += (ynew[b + q] - y[b + q]) ** 2
    m = int(math.sqrt(d2) / (0.5 * smin)) + 1
    prev = 0.0
    for k in range(1, m + 1):
        th = k / m
        if k == m:
            hit = _inside_solid(ynew[b], ynew[b + 1], ynew[b + 2], boxes, annuli)
        else:
            _dense(y, K, h, th, P, buf, b, b + 6)
            hit = _inside_solid(buf[0], buf[1], buf[2], boxes, annuli)
        if hit:
            return _locate(y, K, h, P, b, 5, 0.0, tol_theta, boxes, annuli, buf, prev, th)
        prev = th
    return 2.0


@njit(cache=True)
def integrate_shot(y0, t0, t_end, qm, qq, coulomb, kind, prog, fsrc, fact,
                   z_exit, z_entry, r_lat, boxes, annuli, planes, breakpoints,
                   hmax, h0, rtol, atol_x, atol_v, hmin, max_steps, record_every, rec):
    """Integrate one shot until every ion has finished.

    Returns (status, final, turn, cross, nsteps, nrec) where ``final`` holds
    (t, x, y, z, vx, vy, vz) at the terminating event of each ion.
    """
    n = qm.shape[0]
    N = 6 * n
    smin = _thinnest_solid(boxes, annuli)
    y = y0.copy()
    ynew = np.empty(N)
    ytmp = np.empty(N)
    K = np.zeros((7, N))
    status = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=np.bool_)
    final = np.full((n, 7), np.nan)
    turn = np.full((n, 7), np.nan)
    cross = np.full((n, planes.shape[0], 7), np.nan)
    volts = np.zeros(prog[0].shape[0])
    res = np.zeros(4)
    work = np.zeros(max(fsrc[6].shape[2], 1))
    buf = np.zeros(6)
    P = DENSE_P
    t = t0
    nrec = 0
    h = min(h0, hmax)
    _deriv(t, y, K[0], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
    nsteps = 0
    bp_i = 0
    while True:
        if not active.any():
            break
        if t >= t_end:
            for i in range(n):
                if active[i]:
                    status[i] = TIMEOUT
                    final[i, 0] = t
                    for q in range(6):
                        final[i, 1 + q] = y[6 * i + q]
                    active[i] = False
            break
        if nsteps >= max_steps:
            for i in range(n):
                if active[i]:
                    status[i] = STIFF
                    final[i, 0] = t
                    active[i] = False
            break
        h = min(h, hmax)
        landing = -1.0
        if t + h >= t_end:
            h = t_end - t
            landing = t_end
        while bp_i < breakpoints.shape[0] and breakpoints[bp_i] <= t:
            bp_i += 1
        if bp_i < breakpoints.shape[0] and t + h >= breakpoints[bp_i]:
            h = breakpoints[bp_i] - t
            landing = breakpoints[bp_i]
        # stages
        for c in range(N):
            ytmp[c] = y[c] + h * A21 * K[0, c]
        _deriv(t + C2 * h, ytmp, K[1], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        for c in range(N):
            ytmp[c] = y[c] + h * (A31 * K[0, c] + A32 * K[1, c])
        _deriv(t + C3 * h, ytmp, K[2], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        for c in range(N):
            ytmp[c] = y[c] + h * (A41 * K[0, c] + A42 * K[1, c] + A43 * K[2, c])
        _deriv(t + C4 * h, ytmp, K[3], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        for c in range(N):
            ytmp[c] = y[c] + h * (A51 * K[0, c] + A52 * K[1, c] + A53 * K[2, c] + A54 * K[3, c])
        _deriv(t + C5 * h, ytmp, K[4], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        for c in range(N):
            ytmp[c] = y[c] + h * (A61 * K[0, c] + A62 * K[1, c] + A63 * K[2, c] + A64 * K[3, c]
                                  + A65 * K[4, c])
        tn = landing if landing >= 0.0 else t + h
        _deriv(tn, ytmp, K[5], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        for c in range(N):
            ynew[c] = y[c] + h * (B1 * K[0, c] + B3 * K[2, c] + B4 * K[3, c] + B5 * K[4, c] + B6 * K[5, c])
        _deriv(tn, ynew, K[6], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        err = 0.0
        for c in range(N):
            e = h * (E1 * K[0, c] + E3 * K[2, c] + E4 * K[3, c] + E5 * K[4, c] + E6 * K[5, c]
                     + E7 * K[6, c])
            sc = max(abs(y[c]), abs(ynew[c]))
            tol = (atol_x if (c % 6) < 3 else atol_v) + rtol * sc
            v = abs(e) / tol
            if v > err:
                err = v
        nsteps += 1
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2)
            if h < hmin:
                for i in range(n):
                    if active[i]:
                        status[i] = STIFF
                        final[i, 0] = t
                        for q in range(6):
                            final[i, 1 + q] = y[6 * i + q]
                        active[i] = False
                break
            continue
        # accepted: events per ion
        tol_theta = 1e-12 / h
        changed = False
        for i in range(n):
            if not active[i]:
                continue
            b = 6 * i
            # terminating events: exit, entry, lateral, impact
            th_best = 2.0
            which = -1
            for ek in range(3):
                zv = z_exit if ek == 0 else (z_entry if ek == 1 else r_lat)
                if _event_value(ek, ynew[b:b + 6], zv) >= 0.0:
                    th = _locate(y, K, h, P, b, ek, zv, tol_theta, boxes, annuli, buf)
                    if th < th_best:
                        th_best = th
                        which = ek
            th = _impact_theta(y, ynew, K, h, P, b, smin, tol_theta, boxes, annuli, buf)
            if th < 2.0:
                if th < th_best:
                    th_best = th
                    which = 5
            th_lim = th_best if which >= 0 else 1.0
            # turnaround
            if np.isnan(turn[i, 0]) and y[b + 5] > 0.0 and ynew[b + 5] <= 0.0:
                th = _locate(y, K, h, P, b, 3, 0.0, tol_theta, boxes, annuli, buf)
                if th <= th_lim:
                    _dense(y, K, h, th, P, buf, b, b + 6)
                    turn[i, 0] = t + th * h
                    for q in range(6):
                        turn[i, 1 + q] = buf[q]
            for pk in range(planes.shape[0]):
                if np.isnan(cross[i, pk, 0]) and y[b + 2] < planes[pk] <= ynew[b + 2]:
                    th = _locate(y, K, h, P, b, 4, planes[pk], tol_theta, boxes, annuli, buf)
                    if th <= th_lim:
                        _dense(y, K, h, th, P, buf, b, b + 6)
                        cross[i, pk, 0] = t + th * h
                        for q in range(6):
                            cross[i, pk, 1 + q] = buf[q]
            if which >= 0:
                _dense(y, K, h, th_best, P, buf, b, b + 6)
                final[i, 0] = t + th_best * h
                for q in range(6):
                    final[i, 1 + q] = buf[q]
                    ynew[b + q] = buf[q]
                status[i] = (EXITED, REFLECTED, LATERAL, 0, 0, STRUCK)[which]
                active[i] = False
                changed = True
        t = tn
        for c in range(N):
            y[c] = ynew[c]
        if record_every > 0 and nsteps % record_every == 0 and nrec < rec.shape[0]:
            rec[nrec, 0] = t
            for c in range(N):
                rec[nrec, 1 + c] = y[c]
            nrec += 1
        if changed:
            _deriv(t, y, K[0], n, qm, qq, active, coulomb, kind, volts, prog, fsrc, res, work, fact)
        else:
            for c in range(N):
                K[0, c] = K[6, c]
        if err == 0.0:
            h *= 10.0
        else:
            h *= min(10.0, 0.9 * err ** -0.2)
    return status, final, turn, cross, nsteps, nrec
