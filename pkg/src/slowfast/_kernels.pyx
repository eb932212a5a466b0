# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  Semantics are defined by ``_kernels_py``; every
function here must agree with its NumPy counterpart to rounding."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, pow, INFINITY

cnp.import_array()


DEF MAXD = 16


def propagate_linear(const double[:, :, ::1] P, const double[:, :, ::1] Q,
                     const double[:, ::1] z0, const double[:, :, ::1] dW,
                     Py_ssize_t stride):
    cdef Py_ssize_t T = P.shape[0], d = P.shape[1], k = Q.shape[2]
    cdef Py_ssize_t npath = z0.shape[0]
    cdef Py_ssize_t nrec = T // stride + 1
    if d > MAXD:
        raise ValueError("state dimension above %d" % MAXD)
    out_arr = np.empty((npath, nrec, d))
    cdef double[:, :, ::1] out = out_arr
    cdef double z[MAXD]
    cdef double zn[MAXD]
    cdef Py_ssize_t p, j, a, b, r, left
    cdef double acc
    with nogil:
        for p in range(npath):
            for a in range(d):
                z[a] = z0[p, a]
                out[p, 0, a] = z[a]
            r = 1
            left = stride
            for j in range(T):
                for a in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc = acc + P[j, a, b] * z[b]
                    for b in range(k):
                        acc = acc + Q[j, a, b] * dW[p, j, b]
                    zn[a] = acc
                for a in range(d):
                    z[a] = zn[a]
                left -= 1
                if left == 0:
                    for a in range(d):
                        out[p, r, a] = z[a]
                    r += 1
                    left = stride
    return out_arr


def pitchfork_paths(const double[::1] z0, double t0, double dt, double eps, double sigma,
                    const double[:, ::1] dW, const long long[::1] record_idx,
                    double delta, double blowup):
    cdef Py_ssize_t npath = z0.shape[0], T = dW.shape[1], R = record_idx.shape[0]
    zrec_arr = np.full((npath, R), np.nan)
    esc_arr = np.full(npath, -1, dtype=np.int64)
    cdef double[:, ::1] zrec = zrec_arr
    cdef long long[::1] esc = esc_arr
    cdef double a = dt / eps
    cdef double b = sigma / sqrt(eps)
    cdef double z, y, t
    cdef Py_ssize_t p, j, r
    cdef bint alive
    for p in range(npath):
        z = z0[p]
        r = 0
        alive = True
        for j in range(T + 1):
            t = t0 + j * dt
            while r < R and record_idx[r] == j:
                zrec[p, r] = z
                r += 1
            if esc[p] < 0 and t >= 0.0 and fabs(z) > delta:
                esc[p] = j
            if j == T:
                break
            if alive:
                y = t
                z = z + (y * z - z * z * z) * a + b * dW[p, j]
                if not fabs(z) <= blowup:
                    alive = False
    return zrec_arr, esc_arr


cdef inline double _norm2(double a, double b, double c, double d):
    cdef double s = a * a + b * b + c * c + d * d
    cdef double det = a * d - b * c
    cdef double disc = s * s - 4.0 * det * det
    if disc < 0.0:
        disc = 0.0
    return sqrt(0.5 * (s + sqrt(disc)))


def propagator_norms(const double[:, :, ::1] P):
    cdef Py_ssize_t T = P.shape[0], d = P.shape[1]
    if d > 2:
        raise ValueError("compiled propagator_norms supports d <= 2")
    N_arr = np.zeros((T + 1, T + 1))
    cdef double[:, ::1] N = N_arr
    cdef Py_ssize_t i, j
    cdef double m00, m01, m10, m11, n00, n01, n10, n11
    for j in range(T + 1):
        N[j, j] = 1.0
        if d == 1:
            m00 = 1.0
            for i in range(j, T):
                m00 = P[i, 0, 0] * m00
                N[i + 1, j] = fabs(m00)
        else:
            m00 = 1.0; m01 = 0.0; m10 = 0.0; m11 = 1.0
            for i in range(j, T):
                n00 = P[i, 0, 0] * m00 + P[i, 0, 1] * m10
                n01 = P[i, 0, 0] * m01 + P[i, 0, 1] * m11
                n10 = P[i, 1, 0] * m00 + P[i, 1, 1] * m10
                n11 = P[i, 1, 0] * m01 + P[i, 1, 1] * m11
                m00 = n00; m01 = n01; m10 = n10; m11 = n11
                N[i + 1, j] = _norm2(m00, m01, m10, m11)
    return N_arr


def chi_integrals(const double[::1] times, const double[:, ::1] norms, double power, double prefactor):
    cdef Py_ssize_t T = times.shape[0]
    chi_arr = np.zeros(T)
    err_arr = np.zeros(T)
    cdef double[::1] chi = chi_arr
    cdef double[::1] err = err_arr
    cdef Py_ssize_t i, j
    cdef double M, w, wprev, integ, e, best = 0.0, best_err = 0.0, h
    for i in range(T):
        M = norms[i, i]
        wprev = pow(M, power)
        integ = 0.0
        e = 0.0
        j = i - 1
        while j >= 0:
            if norms[i, j] > M:
                M = norms[i, j]
            w = pow(M, power)
            h = times[j + 1] - times[j]
            integ = integ + 0.5 * (w + wprev) * h
            e = e + 0.5 * fabs(w - wprev) * h
            wprev = w
            j -= 1
        if integ > best:
            best = integ
        if e > best_err:
            best_err = e
        chi[i] = prefactor * best
        err[i] = prefactor * best_err
    return chi_arr, err_arr


def first_crossing(const double[:, ::1] q, double level):
    cdef Py_ssize_t npath = q.shape[0], T = q.shape[1], p, j
    idx_arr = np.full(npath, -1, dtype=np.int64)
    cdef long long[::1] idx = idx_arr
    for p in range(npath):
        for j in range(T):
            if q[p, j] >= level:
                idx[p] = j
                break
    return idx_arr
