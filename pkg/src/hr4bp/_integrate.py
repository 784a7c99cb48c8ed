"""Compiled propagation core: DOP853 stepping for the HR4BP field.

Single-state, batched, and variational right-hand sides with an adaptive
8th-order Dormand-Prince loop, plus a radius-event driver used by manifold
globalization.  Mirrors the scipy DOP853 implementation (same tableau, error
estimate, and step control) so the two backends agree to integration
tolerance; tests cross-validate them.
"""

import math

import numpy as np

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap

from hr4bp._dop853_tableau import A, B, C, E3, E5

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ERR_EXP = -1.0 / 8.0

# status codes returned by the stepping loops
OK = 0
STEP_UNDERFLOW = -2
TOO_MANY_STEPS = -3


def pack_params(p):
    """Flatten ModelParams into the tuple consumed by the jit kernels."""
    cc, ss = p.hill.cos_sin_coeffs()
    return (float(p.m), float(p.mu), float(p.hill.grav_coeff),
            np.ascontiguousarray(cc), np.ascontiguousarray(ss))


@njit(cache=True)
def _moon_offset(tau, cc, ss):
    xi = 0.0
    eta = 0.0
    for k in range(cc.shape[0]):
        ang = 2.0 * (k + 1) * tau
        xi += cc[k] * math.cos(ang)
        eta += ss[k] * math.sin(ang)
    return 1.0 + xi, eta


@njit(cache=True)
def _accel(tau, x, y, z, vx, vy, m, mu, g, cc, ss):
    rx, ry = _moon_offset(tau, cc, ss)
    ex = -mu * rx
    ey = -mu * ry
    mx = (1.0 - mu) * rx
    my = (1.0 - mu) * ry
    dex = x - ex
    dey = y - ey
    dmx = x - mx
    dmy = y - my
    r1sq = dex * dex + dey * dey + z * z
    r2sq = dmx * dmx + dmy * dmy + z * z
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    k1 = g * (1.0 - mu) / (r1sq * r1)
    k2 = g * mu / (r2sq * r2)
    amp = 1.0 + 2.0 * m + 1.5 * m * m
    c2 = math.cos(2.0 * tau)
    s2 = math.sin(2.0 * tau)
    tm = 1.5 * m * m
    gx = amp * x + tm * (x * c2 - y * s2) - k1 * dex - k2 * dmx
    gy = amp * y + tm * (-y * c2 - x * s2) - k1 * dey - k2 * dmy
    gz = -m * m * z - (k1 + k2) * z
    w = 2.0 * (1.0 + m)
    return w * vy + gx, -w * vx + gy, gz


@njit(cache=True)
def _hessian(tau, x, y, z, m, mu, g, cc, ss, H):
    rx, ry = _moon_offset(tau, cc, ss)
    amp = 1.0 + 2.0 * m + 1.5 * m * m
    c2 = math.cos(2.0 * tau)
    s2 = math.sin(2.0 * tau)
    tm = 1.5 * m * m
    H[0, 0] = amp + tm * c2
    H[1, 1] = amp - tm * c2
    H[0, 1] = -tm * s2
    H[1, 0] = -tm * s2
    H[2, 2] = -m * m
    H[0, 2] = 0.0
    H[2, 0] = 0.0
    H[1, 2] = 0.0
    H[2, 1] = 0.0
    for b in range(2):
        if b == 0:
            px = -mu * rx
            py = -mu * ry
            kap = g * (1.0 - mu)
        else:
            px = (1.0 - mu) * rx
            py = (1.0 - mu) * ry
            kap = g * mu
        dx = x - px
        dy = y - py
        rsq = dx * dx + dy * dy + z * z
        r = math.sqrt(rsq)
        r5 = rsq * rsq * r
        f3 = kap * 3.0 / r5
        fr = kap / (rsq * r)
        H[0, 0] += f3 * dx * dx - fr
        H[1, 1] += f3 * dy * dy - fr
        H[2, 2] += f3 * z * z - fr
        H[0, 1] += f3 * dx * dy
        H[1, 0] += f3 * dx * dy
        H[0, 2] += f3 * dx * z
        H[2, 0] += f3 * dx * z
        H[1, 2] += f3 * dy * z
        H[2, 1] += f3 * dy * z


@njit(cache=True)
def _rhs(mode, tau, y, out, m, mu, g, cc, ss):
    """mode 0: stacked 6-dim states; mode 1: stacked 42-dim state+STM."""
    if mode == 0:
        n = y.shape[0] // 6
        for i in range(n):
            b = 6 * i
            ax, ay, az = _accel(tau, y[b], y[b + 1], y[b + 2],
                                y[b + 3], y[b + 4], m, mu, g, cc, ss)
            out[b] = y[b + 3]
            out[b + 1] = y[b + 4]
            out[b + 2] = y[b + 5]
            out[b + 3] = ax
            out[b + 4] = ay
            out[b + 5] = az
    else:
        n = y.shape[0] // 42
        H = np.empty((3, 3))
        w = 2.0 * (1.0 + m)
        for i in range(n):
            b = 42 * i
            ax, ay, az = _accel(tau, y[b], y[b + 1], y[b + 2],
                                y[b + 3], y[b + 4], m, mu, g, cc, ss)
            out[b] = y[b + 3]
            out[b + 1] = y[b + 4]
            out[b + 2] = y[b + 5]
            out[b + 3] = ax
            out[b + 4] = ay
            out[b + 5] = az
            _hessian(tau, y[b], y[b + 1], y[b + 2], m, mu, g, cc, ss, H)
            # phi rows: d(phi) = [[0, I], [H, Cor]] phi
            for col in range(6):
                p0 = y[b + 6 + 0 * 6 + col]
                p1 = y[b + 6 + 1 * 6 + col]
                p2 = y[b + 6 + 2 * 6 + col]
                p3 = y[b + 6 + 3 * 6 + col]
                p4 = y[b + 6 + 4 * 6 + col]
                p5 = y[b + 6 + 5 * 6 + col]
                out[b + 6 + 0 * 6 + col] = p3
                out[b + 6 + 1 * 6 + col] = p4
                out[b + 6 + 2 * 6 + col] = p5
                out[b + 6 + 3 * 6 + col] = (H[0, 0] * p0 + H[0, 1] * p1
                                            + H[0, 2] * p2 + w * p4)
                out[b + 6 + 4 * 6 + col] = (H[1, 0] * p0 + H[1, 1] * p1
                                            + H[1, 2] * p2 - w * p3)
                out[b + 6 + 5 * 6 + col] = (H[2, 0] * p0 + H[2, 1] * p1
                                            + H[2, 2] * p2)


@njit(cache=True)
def _initial_step(mode, t0, y0, f0, direction, rtol, atol, max_step,
                  m, mu, g, cc, ss):
    n = y0.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        d0 += (y0[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, max_step)
    y1 = y0 + h0 * direction * f0
    f1 = np.empty(n)
    _rhs(mode, t0 + h0 * direction, y1, f1, m, mu, g, cc, ss)
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / n) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 8.0)
    return min(100.0 * h0, h1, max_step)


@njit(cache=True)
def _step(mode, t, y, f0, h, direction, K, m, mu, g, cc, ss, ynew, scratch):
    """One DOP853 stage sweep; fills K and ynew, returns nothing."""
    n = y.shape[0]
    for i in range(n):
        K[0, i] = f0[i]
    for s in range(1, 12):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                aij = A[s, j]
                if aij != 0.0:
                    acc += aij * K[j, i]
            scratch[i] = y[i] + h * direction * acc
        _rhs(mode, t + C[s] * h * direction, scratch, K[s], m, mu, g, cc, ss)
    for i in range(n):
        acc = 0.0
        for j in range(12):
            bj = B[j]
            if bj != 0.0:
                acc += bj * K[j, i]
        ynew[i] = y[i] + h * direction * acc
    _rhs(mode, t + h * direction, ynew, K[12], m, mu, g, cc, ss)


@njit(cache=True)
def _error_norm(K, h, y, ynew, rtol, atol):
    n = y.shape[0]
    err5sq = 0.0
    err3sq = 0.0
    for i in range(n):
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        e5 = 0.0
        e3 = 0.0
        for j in range(13):
            if E5[j] != 0.0:
                e5 += E5[j] * K[j, i]
            if E3[j] != 0.0:
                e3 += E3[j] * K[j, i]
        e5 /= sc
        e3 /= sc
        err5sq += e5 * e5
        err3sq += e3 * e3
    if err5sq == 0.0 and err3sq == 0.0:
        return 0.0
    denom = err5sq + 0.01 * err3sq
    return abs(h) * err5sq / math.sqrt(denom * n)


@njit(cache=True)
def integrate(mode, y0, t0, t1, rtol, atol, max_step, max_steps,
              m, mu, g, cc, ss):
    """Integrate to t1; returns (status, t_end, y_end)."""
    n = y0.shape[0]
    y = y0.copy()
    t = t0
    if t1 == t0:
        return OK, t, y
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    f0 = np.empty(n)
    _rhs(mode, t, y, f0, m, mu, g, cc, ss)
    h = _initial_step(mode, t, y, f0, direction, rtol, atol,
                      min(max_step, span), m, mu, g, cc, ss)
    K = np.empty((13, n))
    ynew = np.empty(n)
    scratch = np.empty(n)
    rejected = False
    steps = 0
    while True:
        remaining = abs(t1 - t)
        if remaining <= 0.0:
            return OK, t, y
        if h >= remaining:
            h = remaining
        if h < 1e4 * 2.3e-16 * max(abs(t), 1.0) * 0.001:
            if h < 2.3e-16 * max(abs(t), abs(t1)) * 16.0:
                return STEP_UNDERFLOW, t, y
        steps += 1
        if steps > max_steps:
            return TOO_MANY_STEPS, t, y
        _step(mode, t, y, f0, h, direction, K, m, mu, g, cc, ss, ynew, scratch)
        err = _error_norm(K, h, y, ynew, rtol, atol)
        if err < 1.0:
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = min(_MAX_FACTOR, _SAFETY * err ** _ERR_EXP)
            if rejected:
                factor = min(1.0, factor)
            t = t + h * direction
            for i in range(n):
                y[i] = ynew[i]
                f0[i] = K[12, i]
            h = min(h * factor, max_step)
            rejected = False
        else:
            factor = max(_MIN_FACTOR, _SAFETY * err ** _ERR_EXP)
            h *= factor
            rejected = True


@njit(cache=True)
def _radius_events(tau, y, cc, ss, mu, r_moon, r_geo, r_esc, vals):
    rx, ry = _moon_offset(tau, cc, ss)
    ex = -mu * rx
    ey = -mu * ry
    mx = (1.0 - mu) * rx
    my = (1.0 - mu) * ry
    x = y[0]
    yy = y[1]
    z = y[2]
    vals[0] = math.sqrt((x - mx) ** 2 + (yy - my) ** 2 + z * z) - r_moon
    vals[1] = math.sqrt((x - ex) ** 2 + (yy - ey) ** 2 + z * z) - r_geo
    vals[2] = math.sqrt(x * x + yy * yy + z * z) - r_esc


# scan order of stage samples by ascending C fraction
_STAGE_ORDER = np.argsort(C).astype(np.int64)


@njit(cache=True)
def flow_radius_events(y0, t0, t1, rtol, atol, max_step, max_steps,
                       m, mu, g, cc, ss, r_moon, r_geo, r_esc):
    """Propagate a 6-dim state watching moon/GEO/escape radius crossings.

    Events: 0 = moon distance falls to r_moon, 1 = earth distance falls to
    r_geo, 2 = barycentric radius rises to r_esc.  Crossings are bracketed on
    accepted steps (including internal stage samples) and refined by
    re-integration bisection to ~1e-11 in tau.

    Returns (status, event_id, t_event, y_event, t_end, y_end, min_moon,
    t_min_moon).  event_id = -1 if no event fired before t1.
    """
    n = 6
    y = y0.copy()
    t = t0
    direction = 1.0 if t1 > t0 else -1.0
    f0 = np.empty(n)
    _rhs(0, t, y, f0, m, mu, g, cc, ss)
    span = abs(t1 - t0)
    h = _initial_step(0, t, y, f0, direction, rtol, atol,
                      min(max_step, span), m, mu, g, cc, ss)
    K = np.empty((13, n))
    ynew = np.empty(n)
    scratch = np.empty(n)
    gprev = np.empty(3)
    gcur = np.empty(3)
    ystage = np.empty(n)
    yev = np.empty(n)
    _radius_events(t, y, cc, ss, mu, r_moon, r_geo, r_esc, gprev)
    min_moon = gprev[0] + r_moon
    t_min_moon = t
    # already inside a region at start
    for e in range(3):
        sgn = -1.0 if e < 2 else 1.0
        if sgn * gprev[e] >= 0.0:
            return OK, e, t, y.copy(), t, y.copy(), min_moon, t_min_moon
    rejected = False
    steps = 0
    while True:
        remaining = abs(t1 - t)
        if remaining <= 0.0:
            return OK, -1, t, y.copy(), t, y.copy(), min_moon, t_min_moon
        if h >= remaining:
            h = remaining
        if h < 2.3e-16 * max(abs(t), abs(t1)) * 16.0:
            return STEP_UNDERFLOW, -1, t, y.copy(), t, y.copy(), min_moon, t_min_moon
        steps += 1
        if steps > max_steps:
            return TOO_MANY_STEPS, -1, t, y.copy(), t, y.copy(), min_moon, t_min_moon
        _step(0, t, y, f0, h, direction, K, m, mu, g, cc, ss, ynew, scratch)
        err = _error_norm(K, h, y, ynew, rtol, atol)
        if err >= 1.0:
            h *= max(_MIN_FACTOR, _SAFETY * err ** _ERR_EXP)
            rejected = True
            continue
        # scan stage samples then the endpoint for sign changes
        t_lo = 0.0
        hit_event = -1
        hit_hi = 0.0
        for si in range(13):
            if si < 12:
                stage = _STAGE_ORDER[si]
                if stage == 0:
                    continue
                frac = C[stage]
                for i in range(n):
                    acc = 0.0
                    for j in range(stage):
                        aij = A[stage, j]
                        if aij != 0.0:
                            acc += aij * K[j, i]
                    ystage[i] = y[i] + h * direction * acc
                tcur = t + frac * h * direction
                ycur = ystage
            else:
                frac = 1.0
                tcur = t + h * direction
                ycur = ynew
            _radius_events(tcur, ycur, cc, ss, mu, r_moon, r_geo, r_esc, gcur)
            d_moon = gcur[0] + r_moon
            if d_moon < min_moon:
                min_moon = d_moon
                t_min_moon = tcur
            for e in range(3):
                sgn = -1.0 if e < 2 else 1.0
                if sgn * gcur[e] >= 0.0 and sgn * gprev[e] < 0.0:
                    hit_event = e
                    hit_hi = frac
                    break
            if hit_event >= 0:
                break
            t_lo = frac
            for e in range(3):
                gprev[e] = gcur[e]
        if hit_event >= 0:
            # refine by bisection on re-integration from the step start
            frac_lo = t_lo
            frac_hi = hit_hi
            sgn = -1.0 if hit_event < 2 else 1.0
            for _ in range(60):
                if (frac_hi - frac_lo) * abs(h) < 1e-11:
                    break
                fm = 0.5 * (frac_lo + frac_hi)
                st, tm, ym = integrate(0, y, t, t + fm * h * direction,
                                       rtol, atol, max_step, 10000,
                                       m, mu, g, cc, ss)
                _radius_events(tm, ym, cc, ss, mu, r_moon, r_geo, r_esc, gcur)
                if sgn * gcur[hit_event] >= 0.0:
                    frac_hi = fm
                else:
                    frac_lo = fm
            st, tev, yevf = integrate(0, y, t, t + frac_hi * h * direction,
                                      rtol, atol, max_step, 10000,
                                      m, mu, g, cc, ss)
            for i in range(n):
                yev[i] = yevf[i]
            d_moon = 0.0
            _radius_events(tev, yev, cc, ss, mu, r_moon, r_geo, r_esc, gcur)
            if gcur[0] + r_moon < min_moon:
                min_moon = gcur[0] + r_moon
                t_min_moon = tev
            return OK, hit_event, tev, yev.copy(), tev, yev.copy(), \
                min_moon, t_min_moon
        if err == 0.0:
            factor = _MAX_FACTOR
        else:
            factor = min(_MAX_FACTOR, _SAFETY * err ** _ERR_EXP)
        if rejected:
            factor = min(1.0, factor)
        t = t + h * direction
        for i in range(n):
            y[i] = ynew[i]
            f0[i] = K[12, i]
        h = min(h * factor, max_step)
        rejected = False
