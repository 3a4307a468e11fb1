"""Compiled kernels for 3-RPR forward kinematics.

The geometry is passed as a flat float64 vector
``(c2, c3, d3, l2, l3, cos_theta, sin_theta)``.

For a fixed platform angle phi, legs 1 and 2 pin B1 to the intersection of
two circles, which gives at most two candidate positions (the ``+`` and
``-`` branches).  Substituting them into the third loop-closure equation
gives two scalar residuals of phi.  On every phi interval where the circles
intersect the two branches meet at the tangent end points and form one
closed curve, so its real roots are found by sign-change bracketing on a
dense phi grid followed by bisection and a Newton polish on the full 3x3
system.  Two roots closer than one grid step leave no sign change; they are
caught by a golden-section search at every same-sign local minimum of |f|.
"""

import numpy as np
from numba import njit

MAX_SOLUTIONS = 8
SINGULAR_DET = 1e-10
_TWO_PI = 2.0 * np.pi


@njit(cache=True)
def _wrap(phi):
    return (phi + np.pi) % _TWO_PI - np.pi


@njit(cache=True)
def residuals(G, x, y, phi, r1, r2, r3):
    c2, c3, d3, l2, l3, ct, st = G[0], G[1], G[2], G[3], G[4], G[5], G[6]
    cp = np.cos(phi)
    sp = np.sin(phi)
    u2 = x + l2 * cp - c2
    v2 = y + l2 * sp
    u3 = x + l3 * (cp * ct - sp * st) - c3
    v3 = y + l3 * (sp * ct + cp * st) - d3
    return (x * x + y * y - r1 * r1,
            u2 * u2 + v2 * v2 - r2 * r2,
            u3 * u3 + v3 * v3 - r3 * r3)


@njit(cache=True)
def jacobian_a(G, x, y, phi, out):
    c2, c3, d3, l2, l3, ct, st = G[0], G[1], G[2], G[3], G[4], G[5], G[6]
    cp = np.cos(phi)
    sp = np.sin(phi)
    c23 = cp * ct - sp * st
    s23 = sp * ct + cp * st
    u2 = x + l2 * cp - c2
    v2 = y + l2 * sp
    u3 = x + l3 * c23 - c3
    v3 = y + l3 * s23 - d3
    out[0, 0] = 2.0 * x
    out[0, 1] = 2.0 * y
    out[0, 2] = 0.0
    out[1, 0] = 2.0 * u2
    out[1, 1] = 2.0 * v2
    out[1, 2] = 2.0 * l2 * (v2 * cp - u2 * sp)
    out[2, 0] = 2.0 * u3
    out[2, 1] = 2.0 * v3
    out[2, 2] = 2.0 * l3 * (v3 * c23 - u3 * s23)


@njit(cache=True)
def det3(a):
    return (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))


@njit(cache=True)
def det_a(G, x, y, phi):
    a = np.empty((3, 3))
    jacobian_a(G, x, y, phi, a)
    return det3(a)


@njit(cache=True)
def _branch_point(G, phi, sign, r1, r2, r3):
    """B1 on the given branch and the leg-3 residual at angle phi."""
    c2, c3, d3, l2, l3, ct, st = G[0], G[1], G[2], G[3], G[4], G[5], G[6]
    cp = np.cos(phi)
    sp = np.sin(phi)
    px = c2 - l2 * cp
    py = -l2 * sp
    d2 = px * px + py * py
    d = np.sqrt(d2)
    a = (r1 * r1 - r2 * r2 + d2) / (2.0 * d)
    hh = r1 * r1 - a * a
    h = sign * np.sqrt(hh) if hh > 0.0 else 0.0
    x = (a * px - h * py) / d
    y = (a * py + h * px) / d
    u = x + l3 * (cp * ct - sp * st) - c3
    v = y + l3 * (sp * ct + cp * st) - d3
    return x, y, u * u + v * v - r3 * r3


@njit(cache=True)
def _sample_branches(G, lo, step, nsamp, r1, r2, r3, ph, fp, fm):
    """Leg-3 residual of both branches on ``nsamp + 1`` equally spaced angles.

    cos/sin are advanced by a rotation recurrence, re-seeded every 64 steps
    to bound drift.
    """
    c2, c3, d3, l2, l3, ct, st = G[0], G[1], G[2], G[3], G[4], G[5], G[6]
    cs = np.cos(step)
    ss = np.sin(step)
    rr = r1 * r1 - r2 * r2
    cp = 1.0
    sp = 0.0
    for i in range(nsamp + 1):
        p = lo + step * i
        if i % 64 == 0:
            cp = np.cos(p)
            sp = np.sin(p)
        ph[i] = p
        px = c2 - l2 * cp
        py = -l2 * sp
        d2 = px * px + py * py
        inv_d = 1.0 / np.sqrt(d2)
        a = (rr + d2) * 0.5 * inv_d
        hh = r1 * r1 - a * a
        h = np.sqrt(hh) if hh > 0.0 else 0.0
        ex = px * inv_d
        ey = py * inv_d
        bx = a * ex
        by = a * ey
        ox = l3 * (cp * ct - sp * st) - c3
        oy = l3 * (sp * ct + cp * st) - d3
        u = bx - h * ey + ox
        v = by + h * ex + oy
        fp[i] = u * u + v * v - r3 * r3
        u = bx + h * ey + ox
        v = by - h * ex + oy
        fm[i] = u * u + v * v - r3 * r3
        cn = cp * cs - sp * ss
        sp = sp * cs + cp * ss
        cp = cn


@njit(cache=True)
def _intervals(G, r1, r2, out):
    """Fill ``out`` with (lo, hi, periodic) phi intervals; return their count."""
    c2, l2 = G[0], G[3]
    k = c2 * c2 + l2 * l2
    den = 2.0 * c2 * l2
    clo = (k - (r1 + r2) ** 2) / den
    chi = (k - (r1 - r2) ** 2) / den
    if clo > 1.0 or chi < -1.0 or clo > chi:
        return 0
    if clo <= -1.0 and chi >= 1.0:
        out[0, 0] = -np.pi
        out[0, 1] = np.pi
        out[0, 2] = 1.0
        return 1
    if clo <= -1.0:
        a = np.arccos(chi)
        out[0, 0] = a
        out[0, 1] = _TWO_PI - a
        out[0, 2] = 0.0
        return 1
    if chi >= 1.0:
        a = np.arccos(clo)
        out[0, 0] = -a
        out[0, 1] = a
        out[0, 2] = 0.0
        return 1
    a = np.arccos(chi)
    b = np.arccos(clo)
    out[0, 0] = a
    out[0, 1] = b
    out[0, 2] = 0.0
    out[1, 0] = -b
    out[1, 1] = -a
    out[1, 2] = 0.0
    return 2


@njit(cache=True)
def _bisect(G, lo, hi, flo, sign, r1, r2, r3):
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        _, _, fm = _branch_point(G, mid, sign, r1, r2, r3)
        if (fm > 0.0) == (flo > 0.0):
            lo = mid
            flo = fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def _newton(G, x, y, phi, r1, r2, r3, iters):
    a = np.empty((3, 3))
    for _ in range(iters):
        f1, f2, f3 = residuals(G, x, y, phi, r1, r2, r3)
        jacobian_a(G, x, y, phi, a)
        det = det3(a)
        if abs(det) < SINGULAR_DET:
            break
        # Cramer's rule on a @ dx = -f
        b0, b1, b2 = -f1, -f2, -f3
        dx = (b0 * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
              - a[0, 1] * (b1 * a[2, 2] - a[1, 2] * b2)
              + a[0, 2] * (b1 * a[2, 1] - a[1, 1] * b2)) / det
        dy = (a[0, 0] * (b1 * a[2, 2] - a[1, 2] * b2)
              - b0 * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
              + a[0, 2] * (a[1, 0] * b2 - b1 * a[2, 0])) / det
        dp = (a[0, 0] * (a[1, 1] * b2 - b1 * a[2, 1])
              - a[0, 1] * (a[1, 0] * b2 - b1 * a[2, 0])
              + b0 * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])) / det
        x += dx
        y += dy
        phi += dp
        if abs(dx) + abs(dy) + abs(dp) < 1e-15:
            break
    return x, y, phi


@njit(cache=True)
def _residual_norm(G, x, y, phi, r1, r2, r3):
    f1, f2, f3 = residuals(G, x, y, phi, r1, r2, r3)
    return max(abs(f1), abs(f2), abs(f3))


@njit(cache=True)
def _add_solution(G, sols, res, n, x, y, phi, r1, r2, r3, merge_tol):
    phi = _wrap(phi)
    r = _residual_norm(G, x, y, phi, r1, r2, r3)
    for j in range(n):
        dphi = abs(_wrap(phi - sols[j, 2]))
        if max(abs(x - sols[j, 0]), abs(y - sols[j, 1]), dphi) < merge_tol:
            if r < res[j]:
                sols[j, 0] = x
                sols[j, 1] = y
                sols[j, 2] = phi
                res[j] = r
            return n
    if n >= sols.shape[0]:
        return n
    sols[n, 0] = x
    sols[n, 1] = y
    sols[n, 2] = phi
    res[n] = r
    return n + 1


@njit(cache=True)
def _pair_search(G, a, c, sign, s, r1, r2, r3, polish, merge_tol, sols, res, n):
    """Golden-section search of min s*f on [a, c]; adds the roots it brackets."""
    g = 0.3819660112501051
    b = a + g * (c - a)
    d = c - g * (c - a)
    _, _, fb = _branch_point(G, b, sign, r1, r2, r3)
    _, _, fd = _branch_point(G, d, sign, r1, r2, r3)
    for _ in range(80):
        if s * fb < 0.0 or s * fd < 0.0 or c - a < 1e-15:
            break
        if s * fb < s * fd:
            c = d
            d = b
            fd = fb
            b = a + g * (c - a)
            _, _, fb = _branch_point(G, b, sign, r1, r2, r3)
        else:
            a = b
            b = d
            fb = fd
            d = c - g * (c - a)
            _, _, fd = _branch_point(G, d, sign, r1, r2, r3)
    if s * fb < 0.0 or s * fd < 0.0:
        m = b if s * fb < 0.0 else d
        _, _, fa = _branch_point(G, a, sign, r1, r2, r3)
        _, _, fm = _branch_point(G, m, sign, r1, r2, r3)
        for lo, hi, flo in ((a, m, fa), (m, c, fm)):
            p = _bisect(G, lo, hi, flo, sign, r1, r2, r3)
            x, y, _ = _branch_point(G, p, sign, r1, r2, r3)
            if polish:
                x, y, p = _newton(G, x, y, p, r1, r2, r3, 8)
            n = _add_solution(G, sols, res, n, x, y, p, r1, r2, r3, merge_tol)
        return n
    if not polish:
        return n
    # tangential (double) root
    p = b if s * fb < s * fd else d
    x, y, _ = _branch_point(G, p, sign, r1, r2, r3)
    x, y, p = _newton(G, x, y, p, r1, r2, r3, 30)
    if _residual_norm(G, x, y, p, r1, r2, r3) < 1e-9:
        n = _add_solution(G, sols, res, n, x, y, p, r1, r2, r3, merge_tol)
    return n


@njit(cache=True)
def _solve_one(G, r1, r2, r3, nsamp, polish, merge_tol, sols, res):
    iv = np.empty((2, 3))
    nint = _intervals(G, r1, r2, iv)
    n = 0
    fp = np.empty(nsamp + 1)
    fm = np.empty(nsamp + 1)
    ph = np.empty(nsamp + 1)
    for k in range(nint):
        lo = iv[k, 0]
        hi = iv[k, 1]
        periodic = iv[k, 2] > 0.5
        step = (hi - lo) / nsamp
        _sample_branches(G, lo, step, nsamp, r1, r2, r3, ph, fp, fm)
        if not periodic:
            # end points are tangent points where both branches coincide
            fm[0] = fp[0]
            fm[nsamp] = fp[nsamp]
        for b in range(2):
            sign = 1.0 if b == 0 else -1.0
            f = fp if b == 0 else fm
            for i in range(nsamp):
                if (f[i] > 0.0) != (f[i + 1] > 0.0):
                    p = _bisect(G, ph[i], ph[i + 1], f[i], sign, r1, r2, r3)
                    x, y, _ = _branch_point(G, p, sign, r1, r2, r3)
                    if polish:
                        x, y, p = _newton(G, x, y, p, r1, r2, r3, 8)
                    n = _add_solution(G, sols, res, n, x, y, p,
                                      r1, r2, r3, merge_tol)
            # a close root pair inside one sample interval shows up as a
            # same-sign local minimum of |f|; the junction nodes of an open
            # interval see both branches as neighbours
            for i in range(nsamp + 1):
                if i == 0 or i == nsamp:
                    if periodic:
                        continue
                    j = 1 if i == 0 else nsamp - 1
                    na = fp[j]
                    nb = fm[j]
                else:
                    na = f[i - 1]
                    nb = f[i + 1]
                s = 1.0 if f[i] > 0.0 else -1.0
                if s * na <= 0.0 or s * nb <= 0.0:
                    continue
                if s * f[i] > s * na or s * f[i] > s * nb:
                    continue
                a = ph[max(i - 1, 0)]
                c = ph[min(i + 1, nsamp)]
                n = _pair_search(G, a, c, sign, s, r1, r2, r3, polish,
                                 merge_tol, sols, res, n)
    return n


@njit(cache=True)
def solve_batch(G, rho, nsamp, polish, merge_tol):
    """All real FK solutions for each row of ``rho``.

    Returns ``(poses, residual, det_a, count)`` with ``poses`` of shape
    ``(M, MAX_SOLUTIONS, 3)``; rows past ``count[m]`` are NaN.
    """
    m_count = rho.shape[0]
    poses = np.full((m_count, MAX_SOLUTIONS, 3), np.nan)
    resid = np.full((m_count, MAX_SOLUTIONS), np.nan)
    dets = np.full((m_count, MAX_SOLUTIONS), np.nan)
    count = np.zeros(m_count, np.int64)
    sols = np.empty((MAX_SOLUTIONS, 3))
    res = np.empty(MAX_SOLUTIONS)
    for m in range(m_count):
        n = _solve_one(G, rho[m, 0], rho[m, 1], rho[m, 2], nsamp, polish,
                       merge_tol, sols, res)
        count[m] = n
        for j in range(n):
            poses[m, j, 0] = sols[j, 0]
            poses[m, j, 1] = sols[j, 1]
            poses[m, j, 2] = sols[j, 2]
            resid[m, j] = res[j]
            dets[m, j] = det_a(G, sols[j, 0], sols[j, 1], sols[j, 2])
    return poses, resid, dets, count
