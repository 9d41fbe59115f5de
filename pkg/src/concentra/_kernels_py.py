"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module; ``kernels`` picks one at
import time.
"""

import numpy as np
import scipy.sparse as sp


def shoot(U0, N, p, h, nsteps):
    """RK4 shot for U'' + (N-1)/r U' = U - U^p from U(0)=U0, U'(0)=0.

    Returns (status, count, U, Up) where status is +1 when U crosses zero
    (overshoot), -1 when U' turns positive with U > 0 (undershoot), 0 when
    neither happens before r = nsteps*h. ``count`` samples are valid.
    """
    U = np.empty(nsteps + 1)
    Up = np.empty(nsteps + 1)
    u, v = float(U0), 0.0
    U[0], Up[0] = u, v
    c = N - 1.0
    inv_n = 1.0 / N

    def rhs(r, u, v):
        nl = u - (u ** p if u > 0 else 0.0)
        if r == 0.0:
            return v, nl * inv_n
        return v, nl - c * v / r

    for k in range(nsteps):
        r = k * h
        k1u, k1v = rhs(r, u, v)
        k2u, k2v = rhs(r + 0.5 * h, u + 0.5 * h * k1u, v + 0.5 * h * k1v)
        k3u, k3v = rhs(r + 0.5 * h, u + 0.5 * h * k2u, v + 0.5 * h * k2v)
        k4u, k4v = rhs(r + h, u + h * k3u, v + h * k3v)
        u += h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        U[k + 1], Up[k + 1] = u, v
        if u < 0.0:
            return 1, k + 2, U, Up
        if v > 0.0:
            return -1, k + 2, U, Up
    return 0, nsteps + 1, U, Up


def _primitive(u, inside, penalized, p, ell, slope):
    pos = np.maximum(u, 0.0)
    F = pos ** (p + 1) / (p + 1)
    g = pos ** p
    if penalized:
        out = (~inside.astype(bool)) & (pos > ell)
        if np.any(out):
            po = pos[out]
            F[out] = ell ** (p + 1) / (p + 1) + 0.5 * slope * (po * po - ell * ell)
            g[out] = slope * po
    return F, g


def fused_energy_gradient(K, u, wv, w, inside, penalized, p, ell, slope, grad):
    """Energy 1/2 u.Ku + sum(1/2 wv u^2 - w G(u)); Euclidean gradient written to ``grad``."""
    Ku = K @ u
    F, g = _primitive(u, inside, penalized, p, ell, slope)
    grad[:] = Ku + wv * u - w * g
    return 0.5 * float(u @ Ku) + float(np.sum(0.5 * wv * u * u - w * F))


def energy_only(K, u, wv, w, inside, penalized, p, ell, slope):
    Ku = K @ u
    F, _ = _primitive(u, inside, penalized, p, ell, slope)
    return 0.5 * float(u @ Ku) + float(np.sum(0.5 * wv * u * u - w * F))


def nonlinear_curvature(u, w, inside, penalized, p, ell, slope, out):
    """w * g'(x, u) with the one-sided derivative from below at the kink u = ell."""
    pos = np.maximum(u, 0.0)
    d = np.where(u > 0, p * pos ** (p - 1), 0.0)
    if penalized:
        mask = (~inside.astype(bool)) & (pos > ell)
        d[mask] = slope
    out[:] = w * d


def nonlinear_moment(u, inside, penalized, p, ell, slope, t):
    """sum g(x, t u) u / t over nodes (unweighted)."""
    F, g = _primitive(t * u, inside, penalized, p, ell, slope)
    return float(np.sum(g * u)) / t


def as_csr(K):
    return sp.csr_matrix(K)
