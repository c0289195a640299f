"""Pure-Python twin of ``_kernels.pyx``; same signatures, same arithmetic order."""

import math

NPARAM = 10
IH_TAU_SCALE = 0.1


def _vtrap(x, k):
    u = x / k
    if abs(u) < 1e-6:
        return k * (1.0 + 0.5 * u)
    return x / (-math.expm1(-u))


def _deriv(p, i_inj, v, h, n, r):
    exp = math.exp
    am = 0.1 * _vtrap(v + 35.0, 10.0)
    bm = 4.0 * exp(-(v + 60.0) / 18.0)
    m = am / (am + bm)
    ah = 0.07 * exp(-(v + 58.0) / 20.0)
    bh = 1.0 / (exp(-0.1 * (v + 28.0)) + 1.0)
    an = 0.01 * _vtrap(v + 34.0, 10.0)
    bn = 0.125 * exp(-(v + 44.0) / 80.0)
    r_inf = 1.0 / (1.0 + exp((v + 75.0) / 5.5))
    tau_r = IH_TAU_SCALE / (exp(-14.59 - 0.086 * v) + exp(-1.87 + 0.0701 * v))
    n2 = n * n
    i_ion = (p[1] * m * m * m * h * (v - p[5])
             + p[2] * n2 * n2 * (v - p[6])
             + p[3] * (v - p[7])
             + p[4] * r * (v - p[8]))
    return ((i_inj - i_ion) / p[0],
            p[9] * (ah * (1.0 - h) - bh * h),
            p[9] * (an * (1.0 - n) - bn * n),
            (r_inf - r) / tau_r)


def _integrate(p, current, dt, y0, out):
    p = [float(x) for x in p]
    v, h, n, r = (float(x) for x in y0)
    nt = len(out)
    half = 0.5 * dt
    sixth = dt / 6.0
    buf = [0.0] * nt
    buf[0] = v
    for i in range(nt - 1):
        cur = float(current[i])
        try:
            a = _deriv(p, cur, v, h, n, r)
            b = _deriv(p, cur, v + half * a[0], h + half * a[1], n + half * a[2], r + half * a[3])
            c = _deriv(p, cur, v + half * b[0], h + half * b[1], n + half * b[2], r + half * b[3])
            d = _deriv(p, cur, v + dt * c[0], h + dt * c[1], n + dt * c[2], r + dt * c[3])
        except OverflowError:   # C's exp returns inf here; report the same step
            out[: i + 1] = buf[: i + 1]
            return i + 1
        v = v + sixth * (a[0] + 2.0 * b[0] + 2.0 * c[0] + d[0])
        h = h + sixth * (a[1] + 2.0 * b[1] + 2.0 * c[1] + d[1])
        n = n + sixth * (a[2] + 2.0 * b[2] + 2.0 * c[2] + d[2])
        r = r + sixth * (a[3] + 2.0 * b[3] + 2.0 * c[3] + d[3])
        if not math.isfinite(v) or abs(v) > 1000.0:
            out[: i + 1] = buf[: i + 1]
            return i + 1
        buf[i + 1] = v
    out[:] = buf
    return -1


def integrate(params, current, dt, y0, out):
    if len(params) != NPARAM or len(y0) != 4:
        raise ValueError("bad parameter or state vector length")
    if len(current) != len(out):
        raise ValueError("current and output lengths differ")
    return _integrate(params, current, dt, y0, out)


def integrate_batch(params, current, dt, y0, out):
    if not (len(params) == len(current) == len(y0) == len(out)):
        raise ValueError("batch dimensions differ")
    return [integrate(params[b], current[b], dt, y0[b], out[b]) for b in range(len(out))]


def derivative(params, i_inj, y):
    return _deriv([float(x) for x in params], float(i_inj), *(float(x) for x in y))
