# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: the radial shooting step and the fused sparse
energy/gradient pass over grid nodes."""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow

cnp.import_array()


cdef inline double _ipow(double x, double p) noexcept nogil:
    # integer exponents dominate in practice (p = 2, 3)
    if p == 3.0:
        return x * x * x
    if p == 2.0:
        return x * x
    if p == 4.0:
        return x * x * x * x
    return pow(x, p)


cdef inline void _rhs(double r, double u, double v, double c, double inv_n, double p,
                      double *du, double *dv) noexcept nogil:
    cdef double nl = u
    if u > 0.0:
        nl -= _ipow(u, p)
    du[0] = v
    if r == 0.0:
        dv[0] = nl * inv_n
    else:
        dv[0] = nl - c * v / r


def shoot(double U0, int N, double p, double h, int nsteps):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] U = np.empty(nsteps + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] Up = np.empty(nsteps + 1)
    cdef double u = U0, v = 0.0, r
    cdef double c = N - 1.0, inv_n = 1.0 / N
    cdef double k1u, k1v, k2u, k2v, k3u, k3v, k4u, k4v
    cdef int k
    U[0] = u
    Up[0] = v
    for k in range(nsteps):
        r = k * h
        _rhs(r, u, v, c, inv_n, p, &k1u, &k1v)
        _rhs(r + 0.5 * h, u + 0.5 * h * k1u, v + 0.5 * h * k1v, c, inv_n, p, &k2u, &k2v)
        _rhs(r + 0.5 * h, u + 0.5 * h * k2u, v + 0.5 * h * k2v, c, inv_n, p, &k3u, &k3v)
        _rhs(r + h, u + h * k3u, v + h * k3v, c, inv_n, p, &k4u, &k4v)
        u += h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        U[k + 1] = u
        Up[k + 1] = v
        if u < 0.0:
            return 1, k + 2, U, Up
        if v > 0.0:
            return -1, k + 2, U, Up
    return 0, nsteps + 1, U, Up


cdef inline void _prim(double u, bint outside, double p, double ell, double slope,
                       double *F, double *g) noexcept nogil:
    if u <= 0.0:
        F[0] = 0.0
        g[0] = 0.0
    elif outside and u > ell:
        F[0] = _ipow(ell, p + 1.0) / (p + 1.0) + 0.5 * slope * (u * u - ell * ell)
        g[0] = slope * u
    else:
        g[0] = _ipow(u, p)
        F[0] = g[0] * u / (p + 1.0)


def fused_energy_gradient(K, double[::1] u, double[::1] wv, double w,
                          unsigned char[::1] inside, bint penalized,
                          double p, double ell, double slope, double[::1] grad):
    cdef int[::1] indptr = K.indptr
    cdef int[::1] indices = K.indices
    cdef double[::1] data = K.data
    cdef Py_ssize_t n = u.shape[0], i, jj
    cdef double Ku, F, g, energy = 0.0, ui
    cdef bint outside
    with nogil:
        for i in range(n):
            Ku = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                Ku += data[jj] * u[indices[jj]]
            ui = u[i]
            outside = penalized and not inside[i]
            _prim(ui, outside, p, ell, slope, &F, &g)
            energy += 0.5 * ui * Ku + 0.5 * wv[i] * ui * ui - w * F
            grad[i] = Ku + wv[i] * ui - w * g
    return energy


def energy_only(K, double[::1] u, double[::1] wv, double w,
                unsigned char[::1] inside, bint penalized,
                double p, double ell, double slope):
    cdef int[::1] indptr = K.indptr
    cdef int[::1] indices = K.indices
    cdef double[::1] data = K.data
    cdef Py_ssize_t n = u.shape[0], i, jj
    cdef double Ku, F, g, energy = 0.0, ui
    cdef bint outside
    with nogil:
        for i in range(n):
            Ku = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                Ku += data[jj] * u[indices[jj]]
            ui = u[i]
            outside = penalized and not inside[i]
            _prim(ui, outside, p, ell, slope, &F, &g)
            energy += 0.5 * ui * Ku + 0.5 * wv[i] * ui * ui - w * F
    return energy


def nonlinear_curvature(double[::1] u, double w, unsigned char[::1] inside, bint penalized,
                        double p, double ell, double slope, double[::1] out):
    cdef Py_ssize_t n = u.shape[0], i
    cdef double ui
    with nogil:
        for i in range(n):
            ui = u[i]
            if ui <= 0.0:
                out[i] = 0.0
            elif penalized and not inside[i] and ui > ell:
                out[i] = w * slope
            else:
                out[i] = w * p * _ipow(ui, p - 1.0)


def nonlinear_moment(double[::1] u, unsigned char[::1] inside, bint penalized,
                     double p, double ell, double slope, double t):
    cdef Py_ssize_t n = u.shape[0], i
    cdef double F, g, acc = 0.0
    cdef bint outside
    with nogil:
        for i in range(n):
            outside = penalized and not inside[i]
            _prim(t * u[i], outside, p, ell, slope, &F, &g)
            acc += g * u[i]
    return acc / t


def as_csr(K):
    import scipy.sparse as sp
    K = sp.csr_matrix(K)
    if K.indptr.dtype != np.int32:
        K.indptr = K.indptr.astype(np.int32)
        K.indices = K.indices.astype(np.int32)
    return K
