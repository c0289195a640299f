# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 integrator for the point-neuron oracle.

Parameter vector layout (see ``oracle.PARAM_FIELDS``):
    0 C, 1 g_na, 2 g_k, 3 g_l, 4 g_h, 5 e_na, 6 e_k, 7 e_l, 8 e_h, 9 phi
State layout: V, h, n, r.
"""

from libc.math cimport exp, expm1, fabs, isfinite

cdef Py_ssize_t NPARAM = 10
cdef double IH_TAU_SCALE = 0.1


cdef inline double _vtrap(double x, double k) noexcept nogil:
    cdef double u = x / k
    if fabs(u) < 1e-6:
        return k * (1.0 + 0.5 * u)
    return x / (-expm1(-u))


cdef inline void _deriv(const double* p, double i_inj, const double* y,
                        double* dy) noexcept nogil:
    cdef double v = y[0]
    cdef double h = y[1]
    cdef double n = y[2]
    cdef double r = y[3]
    cdef double am = 0.1 * _vtrap(v + 35.0, 10.0)
    cdef double bm = 4.0 * exp(-(v + 60.0) / 18.0)
    cdef double m = am / (am + bm)
    cdef double ah = 0.07 * exp(-(v + 58.0) / 20.0)
    cdef double bh = 1.0 / (exp(-0.1 * (v + 28.0)) + 1.0)
    cdef double an = 0.01 * _vtrap(v + 34.0, 10.0)
    cdef double bn = 0.125 * exp(-(v + 44.0) / 80.0)
    cdef double r_inf = 1.0 / (1.0 + exp((v + 75.0) / 5.5))
    cdef double tau_r = IH_TAU_SCALE / (exp(-14.59 - 0.086 * v) + exp(-1.87 + 0.0701 * v))
    cdef double n2 = n * n
    cdef double i_ion = (p[1] * m * m * m * h * (v - p[5])
                         + p[2] * n2 * n2 * (v - p[6])
                         + p[3] * (v - p[7])
                         + p[4] * r * (v - p[8]))
    dy[0] = (i_inj - i_ion) / p[0]
    dy[1] = p[9] * (ah * (1.0 - h) - bh * h)
    dy[2] = p[9] * (an * (1.0 - n) - bn * n)
    dy[3] = (r_inf - r) / tau_r


cdef Py_ssize_t _integrate(const double* p, const double* current, Py_ssize_t nt,
                           double dt, const double* y0, double* out) noexcept nogil:
    cdef double y[4]
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef double tmp[4]
    cdef Py_ssize_t i, j
    cdef double half = 0.5 * dt
    cdef double sixth = dt / 6.0
    cdef double cur
    for j in range(4):
        y[j] = y0[j]
    out[0] = y[0]
    for i in range(nt - 1):
        cur = current[i]
        _deriv(p, cur, y, k1)
        for j in range(4):
            tmp[j] = y[j] + half * k1[j]
        _deriv(p, cur, tmp, k2)
        for j in range(4):
            tmp[j] = y[j] + half * k2[j]
        _deriv(p, cur, tmp, k3)
        for j in range(4):
            tmp[j] = y[j] + dt * k3[j]
        _deriv(p, cur, tmp, k4)
        for j in range(4):
            y[j] = y[j] + sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        if not isfinite(y[0]) or fabs(y[0]) > 1000.0:
            return i + 1
        out[i + 1] = y[0]
    return -1


def integrate(const double[::1] params, const double[::1] current, double dt,
              const double[::1] y0, double[::1] out):
    """Fill ``out`` with the membrane voltage; return -1 or the failing index.

    ``current[i]`` (uA/cm^2) is held constant over step ``[t_i, t_{i+1})``.
    """
    if params.shape[0] != NPARAM or y0.shape[0] != 4:
        raise ValueError("bad parameter or state vector length")
    if current.shape[0] != out.shape[0]:
        raise ValueError("current and output lengths differ")
    cdef Py_ssize_t res
    with nogil:
        res = _integrate(&params[0], &current[0], out.shape[0], dt, &y0[0], &out[0])
    return res


def integrate_batch(const double[:, ::1] params, const double[:, ::1] current, double dt,
                    const double[:, ::1] y0, double[:, ::1] out):
    """Row-wise ``integrate``; returns a list of per-row status codes."""
    cdef Py_ssize_t b, nb = out.shape[0]
    if params.shape[0] != nb or current.shape[0] != nb or y0.shape[0] != nb:
        raise ValueError("batch dimensions differ")
    if params.shape[1] != NPARAM or y0.shape[1] != 4 or current.shape[1] != out.shape[1]:
        raise ValueError("bad row lengths")
    codes = [-1] * nb
    cdef Py_ssize_t res
    for b in range(nb):
        with nogil:
            res = _integrate(&params[b, 0], &current[b, 0], out.shape[1], dt,
                             &y0[b, 0], &out[b, 0])
        codes[b] = res
    return codes


def derivative(const double[::1] params, double i_inj, const double[::1] y):
    cdef double dy[4]
    _deriv(&params[0], i_inj, &y[0], dy)
    return (dy[0], dy[1], dy[2], dy[3])
