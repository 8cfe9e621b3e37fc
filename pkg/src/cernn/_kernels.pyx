# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the structured cascade and modReLU.

Same call signatures and return conventions as ``_kernels_py``.  Every batch
row is pushed through the whole cascade while it sits in cache.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cos, sin, M_PI

cnp.import_array()

BACKEND = "compiled"

cdef dict _PLANS = {}


cdef tuple _plan(Py_ssize_t n):
    plan = _PLANS.get(n)
    if plan is None:
        if n < 1 or (n & (n - 1)):
            raise ValueError("radix-2 kernel needs a power-of-two length, got %d" % n)
        bits = n.bit_length() - 1
        rev = np.zeros(n, dtype=np.intp)
        for i in range(n):
            rev[i] = int(format(i, "0%db" % bits)[::-1], 2) if bits else 0
        k = np.arange(n // 2 if n > 1 else 1)
        tw = np.exp(-2j * np.pi * k / n)
        plan = (rev, tw)
        _PLANS[n] = plan
    return plan


cdef inline void _fft_row(double complex* a, Py_ssize_t n, const Py_ssize_t* rev,
                          const double complex* tw, bint inverse, double scale) noexcept nogil:
    cdef Py_ssize_t i, j, size, half, step, start, k
    cdef double complex tmp, u, t, w
    for i in range(n):
        j = rev[i]
        if j > i:
            tmp = a[i]
            a[i] = a[j]
            a[j] = tmp
    size = 2
    while size <= n:
        half = size >> 1
        step = n // size
        start = 0
        while start < n:
            for k in range(half):
                w = tw[k * step]
                if inverse:
                    w = w.real - 1j * w.imag
                u = a[start + k]
                t = w * a[start + k + half]
                a[start + k] = u + t
                a[start + k + half] = u - t
            start += size
        size <<= 1
    for i in range(n):
        a[i] = a[i] * scale


cdef inline void _reflect_row(double complex* a, const double complex* v, Py_ssize_t n,
                              double s) noexcept nogil:
    cdef Py_ssize_t i
    cdef double complex c = 0
    for i in range(n):
        c = c + (v[i].real - 1j * v[i].imag) * a[i]
    c = c * (2.0 / s)
    for i in range(n):
        a[i] = a[i] - c * v[i]


cdef double _sqnorm(const double complex* v, Py_ssize_t n) noexcept nogil:
    cdef double s = 0
    cdef Py_ssize_t i
    for i in range(n):
        s += v[i].real * v[i].real + v[i].imag * v[i].imag
    return s


def fft(x, bint inverse=False):
    cdef double complex[:, ::1] out = np.array(x, dtype=np.complex128, order="C", copy=True)
    cdef Py_ssize_t b = out.shape[0], n = out.shape[1], r
    rev, tw = _plan(n)
    cdef Py_ssize_t[::1] rv = rev
    cdef double complex[::1] twv = tw
    cdef double scale = 1.0 / sqrt(<double>n)
    with nogil:
        for r in range(b):
            _fft_row(&out[r, 0], n, &rv[0], &twv[0], inverse, scale)
    return np.asarray(out)


def cascade_forward(x, diags, refl, perm):
    xa = np.ascontiguousarray(x, dtype=np.complex128)
    cdef Py_ssize_t b = xa.shape[0], n = xa.shape[1], r, i
    rev, tw = _plan(n)
    cdef Py_ssize_t[::1] rv = rev
    cdef double complex[::1] twv = tw
    cdef double complex[:, ::1] xv = xa
    cdef double complex[:, ::1] d = np.ascontiguousarray(diags, dtype=np.complex128)
    cdef double complex[:, ::1] v = np.ascontiguousarray(refl, dtype=np.complex128)
    cdef Py_ssize_t[::1] p = np.ascontiguousarray(perm, dtype=np.intp)
    tape = np.empty((5, b, n), dtype=np.complex128)
    out = np.empty((b, n), dtype=np.complex128)
    cdef double complex[:, :, ::1] tp = tape
    cdef double complex[:, ::1] y = out
    cdef double scale = 1.0 / sqrt(<double>n)
    cdef double s0 = _sqnorm(&v[0, 0], n), s1 = _sqnorm(&v[1, 0], n)
    cdef double complex* a
    with nogil:
        for r in range(b):
            a = &tp[1, r, 0]
            for i in range(n):
                tp[0, r, i] = xv[r, i]
                a[i] = d[0, i] * xv[r, i]
            _fft_row(a, n, &rv[0], &twv[0], False, scale)
            # stage input a2 stays in tp[1]; work on a copy in tp[2]
            for i in range(n):
                y[r, i] = a[i]
            _reflect_row(&y[r, 0], &v[0, 0], n, s0)
            a = &tp[2, r, 0]
            for i in range(n):
                a[i] = y[r, p[i]]
            a = &tp[3, r, 0]
            for i in range(n):
                a[i] = d[1, i] * tp[2, r, i]
            _fft_row(a, n, &rv[0], &twv[0], True, scale)
            a = &tp[4, r, 0]
            for i in range(n):
                a[i] = tp[3, r, i]
            _reflect_row(a, &v[1, 0], n, s1)
            for i in range(n):
                y[r, i] = d[2, i] * a[i]
    return out, tape


cdef inline void _reflect_vjp_row(double complex* g, const double complex* x,
                                  const double complex* v, Py_ssize_t n, double s,
                                  double complex* gv) noexcept nogil:
    # accumulates dL/dv into gv and overwrites g with R g
    cdef Py_ssize_t i
    cdef double complex c = 0, alpha = 0, vg = 0, cc
    cdef double re_ac
    for i in range(n):
        c = c + (v[i].real - 1j * v[i].imag) * x[i]
        alpha = alpha + (g[i].real - 1j * g[i].imag) * v[i]
        vg = vg + (v[i].real - 1j * v[i].imag) * g[i]
    cc = c.real - 1j * c.imag
    re_ac = (alpha * c).real * 4.0 / (s * s)
    for i in range(n):
        gv[i] = gv[i] - (2.0 / s) * (cc * g[i] + alpha * x[i]) + re_ac * v[i]
    vg = vg * (2.0 / s)
    for i in range(n):
        g[i] = g[i] - vg * v[i]


def cascade_backward(g, tape, diags, refl, perm):
    ga = np.array(g, dtype=np.complex128, order="C", copy=True)
    cdef Py_ssize_t b = ga.shape[0], n = ga.shape[1], r, i
    rev, tw = _plan(n)
    cdef Py_ssize_t[::1] rv = rev
    cdef double complex[::1] twv = tw
    cdef double complex[:, ::1] gw = ga
    cdef double complex[:, :, ::1] tp = np.ascontiguousarray(tape, dtype=np.complex128)
    cdef double complex[:, ::1] d = np.ascontiguousarray(diags, dtype=np.complex128)
    cdef double complex[:, ::1] v = np.ascontiguousarray(refl, dtype=np.complex128)
    cdef Py_ssize_t[::1] p = np.ascontiguousarray(perm, dtype=np.intp)
    gd_arr = np.zeros((3, n), dtype=np.complex128)
    gv_arr = np.zeros((2, n), dtype=np.complex128)
    cdef double complex[:, ::1] gd = gd_arr
    cdef double complex[:, ::1] gv = gv_arr
    cdef double complex[::1] buf = np.empty(n, dtype=np.complex128)
    cdef double scale = 1.0 / sqrt(<double>n)
    cdef double s0 = _sqnorm(&v[0, 0], n), s1 = _sqnorm(&v[1, 0], n)
    cdef double complex* a
    with nogil:
        for r in range(b):
            a = &gw[r, 0]
            for i in range(n):
                gd[2, i] = gd[2, i] + a[i] * (tp[4, r, i].real - 1j * tp[4, r, i].imag)
                a[i] = (d[2, i].real - 1j * d[2, i].imag) * a[i]
            _reflect_vjp_row(a, &tp[3, r, 0], &v[1, 0], n, s1, &gv[1, 0])
            _fft_row(a, n, &rv[0], &twv[0], False, scale)
            for i in range(n):
                gd[1, i] = gd[1, i] + a[i] * (tp[2, r, i].real - 1j * tp[2, r, i].imag)
                buf[p[i]] = (d[1, i].real - 1j * d[1, i].imag) * a[i]
            for i in range(n):
                a[i] = buf[i]
            _reflect_vjp_row(a, &tp[1, r, 0], &v[0, 0], n, s0, &gv[0, 0])
            _fft_row(a, n, &rv[0], &twv[0], True, scale)
            for i in range(n):
                gd[0, i] = gd[0, i] + a[i] * (tp[0, r, i].real - 1j * tp[0, r, i].imag)
                a[i] = (d[0, i].real - 1j * d[0, i].imag) * a[i]
    return ga, gd_arr, gv_arr


def modrelu_forward(z, b):
    cdef double complex[:, ::1] zv = np.ascontiguousarray(z, dtype=np.complex128)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t nb = zv.shape[0], n = zv.shape[1], r, i
    out_arr = np.zeros((nb, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef double rad, m
    with nogil:
        for r in range(nb):
            for i in range(n):
                rad = sqrt(zv[r, i].real * zv[r, i].real + zv[r, i].imag * zv[r, i].imag)
                m = rad + bv[i]
                if m > 0 and rad > 0:
                    out[r, i] = zv[r, i] * (m / rad)
    return out_arr


def modrelu_backward(z, b, g):
    cdef double complex[:, ::1] zv = np.ascontiguousarray(z, dtype=np.complex128)
    cdef double complex[:, ::1] gv = np.ascontiguousarray(g, dtype=np.complex128)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t nb = zv.shape[0], n = zv.shape[1], r, i
    gz_arr = np.zeros((nb, n), dtype=np.complex128)
    gb_arr = np.zeros(n, dtype=np.float64)
    cdef double complex[:, ::1] gz = gz_arr
    cdef double[::1] gb = gb_arr
    cdef double rad, proj
    with nogil:
        for r in range(nb):
            for i in range(n):
                rad = sqrt(zv[r, i].real * zv[r, i].real + zv[r, i].imag * zv[r, i].imag)
                if rad + bv[i] > 0 and rad > 0:
                    proj = gv[r, i].real * zv[r, i].real + gv[r, i].imag * zv[r, i].imag
                    gz[r, i] = gv[r, i] * (1.0 + bv[i] / rad) - zv[r, i] * (bv[i] * proj / (rad * rad * rad))
                    gb[i] += proj / rad
    return gz_arr, gb_arr
