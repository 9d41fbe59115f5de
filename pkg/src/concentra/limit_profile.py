"""Radial ground state of -Lap U + U = U^p, rescaled profiles and the ground
energy function Sigma (closed form and frozen-coefficient numerics).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, special

from . import kernels
from .errors import DomainError, NonConvergenceError, SolverError
from .fields import (
    DiffusionField,
    PotentialField,
    Transform,
    check_exponent,
    diagonalizing_transform,
    gamma_eval,
)

log = logging.getLogger(__name__)

R_MAX = 20.0
SPLICE_RTOL = 1e-8


def sphere_area(N: int) -> float:
    """Surface measure of the unit sphere in R^N (2 for N = 1)."""
    return 2.0 * math.pi ** (N / 2.0) / math.gamma(N / 2.0)


def _bessel_tail(r, N):
    """Decaying radial solution of -Lap w + w = 0, i.e. r^{1-N/2} K_{N/2-1}(r)."""
    nu = abs(N / 2.0 - 1.0)
    r = np.asarray(r, dtype=float)
    return r ** (1.0 - N / 2.0) * special.kv(nu, r)


def _bessel_tail_derivative(r, N):
    nu = abs(N / 2.0 - 1.0)
    r = np.asarray(r, dtype=float)
    a = 1.0 - N / 2.0
    return a * r ** (a - 1.0) * special.kv(nu, r) + r ** a * special.kvp(nu, r)


@dataclass
class RadialProfile:
    """Samples of the radial ground state U on r_k = k*h_r, 0 <= r_k <= r_max.

    Beyond ``r_splice`` the samples come from the decaying linear tail
    ``tail_c * r^{1-N/2} K_{N/2-1}(r)``, which is also used past ``r_max``.
    """

    N: int
    p: float
    r: np.ndarray
    U: np.ndarray
    dU: np.ndarray
    C0: float
    r_splice: float
    tail_c: float

    @property
    def U0(self) -> float:
        return float(self.U[0])

    @property
    def r_max(self) -> float:
        return float(self.r[-1])

    @property
    def h_r(self) -> float:
        return float(self.r[1] - self.r[0])

    @property
    def C1(self) -> float:
        return self.C0 * (0.5 - 1.0 / (self.p + 1.0))

    def value(self, rho):
        """U(|rho|), linear interpolation inside [0, r_max], Bessel tail beyond."""
        rho = np.abs(np.asarray(rho, dtype=float))
        out = np.interp(rho, self.r, self.U)
        far = rho > self.r_max
        if np.any(far):
            out = np.where(far, self.tail_c * _bessel_tail(np.where(far, rho, 1.0), self.N), out)
        return out

    def derivative(self, rho):
        """U'(|rho|) by linear interpolation of the sampled derivative."""
        rho = np.abs(np.asarray(rho, dtype=float))
        out = np.interp(rho, self.r, self.dU)
        far = rho > self.r_max
        if np.any(far):
            out = np.where(far, self.tail_c * _bessel_tail_derivative(np.where(far, rho, 1.0), self.N), out)
        return out

    def residual(self) -> np.ndarray:
        """Second-order finite-difference residual of U'' + (N-1)/r U' - U + U^p."""
        U, h, N, p = self.U, self.h_r, self.N, self.p
        res = np.empty(U.size - 1)
        # r = 0: U''(0) = (U0 - U0^p)/N, Laplacian = N U''(0)
        res[0] = 2.0 * N * (U[1] - U[0]) / h**2 - U[0] + U[0] ** p
        r = self.r[1:-1]
        d2 = (U[2:] - 2 * U[1:-1] + U[:-2]) / h**2
        d1 = (U[2:] - U[:-2]) / (2 * h)
        res[1:] = d2 + (N - 1) / r * d1 - U[1:-1] + np.maximum(U[1:-1], 0) ** p
        return res

    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual())))

    def check_invariants(self) -> None:
        if not self.U[0] > 1.0:
            raise SolverError(f"U(0)={self.U[0]} must exceed 1")
        if np.any(np.diff(self.U) >= 0):
            raise SolverError("profile is not strictly decreasing")
        if not self.U[-1] < 1e-8 * self.U[0]:
            raise SolverError("profile tail is not below 1e-8 U(0) at r_max; increase r_max")

    # serialization ----------------------------------------------------------

    def save(self, path, extra_header: Optional[list[str]] = None) -> None:
        with open(path, "w") as fh:
            for line in extra_header or []:
                fh.write(f"# {line}\n")
            fh.write("# N p U0 C0 rmax hr\n")
            fh.write(f"# {self.N} {self.p!r} {self.U0!r} {self.C0!r} {self.r_max!r} {self.h_r!r}\n")
            fh.write(f"# splice {self.r_splice!r} {self.tail_c!r}\n")
            for rk, uk in zip(self.r, self.U):
                fh.write(f"{rk:.17g} {uk:.17g}\n")

    @classmethod
    def load(cls, path) -> "RadialProfile":
        meta = None
        splice = None
        rows = []
        with open(path) as fh:
            lines = fh.read().splitlines()
        for i, line in enumerate(lines):
            if line.startswith("# N p U0 C0 rmax hr"):
                meta = lines[i + 1][1:].split()
            elif line.startswith("# splice"):
                splice = line.split()[2:]
            elif line and not line.startswith("#"):
                rows.append([float(x) for x in line.split()])
        if meta is None:
            raise ValueError(f"{path}: missing '# N p U0 C0 rmax hr' header")
        data = np.asarray(rows)
        N, p = int(meta[0]), float(meta[1])
        r, U = data[:, 0], data[:, 1]
        r_splice, tail_c = (float(splice[0]), float(splice[1])) if splice else (r[-1], 0.0)
        # derivative: ODE-consistent differences (not stored in the two-column file)
        dU = np.gradient(U, r, edge_order=2)
        dU[0] = 0.0
        return cls(N, p, r, U, dU, float(meta[3]), r_splice, tail_c)


def _classify(U0, N, p, h, nsteps):
    status, count, U, dU = kernels.active.shoot(float(U0), int(N), float(p), float(h), int(nsteps))
    return status, count, U, dU


def solve_radial_ground_state(N: int, p: float, tol: float = 1e-14, r_max: float = R_MAX,
                              h_r: Optional[float] = None, splice_rtol: float = SPLICE_RTOL,
                              bracket=(1.0 + 1e-6, 10.0)) -> RadialProfile:
    """Shooting with bisection on U(0) for the positive radial solution.

    Parameters
    ----------
    tol : width of the final U(0) bracket.
    h_r : RK4 step; defaults to 1e-3 * r_max.
    splice_rtol : relative divergence of the two bracketing shots at which the
        trajectory is no longer trusted and the linear tail is spliced in.
    """
    check_exponent(N, p)
    if h_r is None:
        h_r = 1e-3 * r_max
    nsteps = int(round(r_max / h_r))
    h_r = r_max / nsteps

    lo, hi = map(float, bracket)
    s_lo = _classify(lo, N, p, h_r, nsteps)[0]
    s_hi = _classify(hi, N, p, h_r, nsteps)[0]
    if s_lo != -1 or s_hi != 1:
        raise SolverError(f"no shooting bracket in [{lo}, {hi}] for N={N}, p={p} (statuses {s_lo}, {s_hi})")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s = _classify(mid, N, p, h_r, nsteps)[0]
        if s == 1:
            hi = mid
        elif s == -1:
            lo = mid
        else:
            # resolved to rounding level; keep the bracket for the splice test
            break

    _, c_lo, U_lo, dU_lo = _classify(lo, N, p, h_r, nsteps)
    _, c_hi, U_hi, dU_hi = _classify(hi, N, p, h_r, nsteps)
    m = min(c_lo, c_hi)
    rel = np.abs(U_hi[:m] - U_lo[:m]) / np.maximum(np.abs(U_lo[:m]), 1e-300)
    bad = np.nonzero((rel > splice_rtol) | (U_lo[:m] <= 0) | (dU_lo[:m] > 0))[0]
    k_s = (bad[0] if bad.size else m) - 1
    r = np.linspace(0.0, r_max, nsteps + 1)
    if k_s < 2 or U_lo[k_s] >= 0.5 * U_lo[0]:
        raise SolverError("trajectory unreliable before the tail: reduce h_r")
    r_s = r[k_s]
    tail_c = U_lo[k_s] / float(_bessel_tail(r_s, N))
    if not tail_c > 0 or not np.isfinite(tail_c):
        raise SolverError("tail does not decay: step size too coarse")

    U = np.empty(nsteps + 1)
    dU = np.empty(nsteps + 1)
    U[: k_s + 1] = U_lo[: k_s + 1]
    dU[: k_s + 1] = dU_lo[: k_s + 1]
    U[k_s + 1:] = tail_c * _bessel_tail(r[k_s + 1:], N)
    dU[k_s + 1:] = tail_c * _bessel_tail_derivative(r[k_s + 1:], N)
    dU[0] = 0.0

    weight = sphere_area(N) * r ** (N - 1)
    C0 = float(integrate.simpson(U ** (p + 1) * weight, x=r))
    prof = RadialProfile(N, float(p), r, U, dU, C0, float(r_s), float(tail_c))
    prof.check_invariants()
    log.debug("radial profile N=%d p=%g U0=%.15g C0=%.15g splice=%.3f", N, p, prof.U0, C0, r_s)
    return prof


_PROFILE_CACHE: dict = {}


def cached_profile(N: int, p: float) -> RadialProfile:
    """Default-parameter radial profile, memoized per (N, p)."""
    key = (int(N), float(p))
    if key not in _PROFILE_CACHE:
        _PROFILE_CACHE[key] = solve_radial_ground_state(N, p)
    return _PROFILE_CACHE[key]


# ----------------------------------------------------------------------------
# rescaled profile
# ----------------------------------------------------------------------------

@dataclass
class ScaledProfile:
    """x -> alpha * U(beta * |T^t (x - xi)|) with coefficients frozen at eps*xi."""

    center: np.ndarray
    eps: float
    alpha: float
    beta: float
    transform: Transform
    profile: RadialProfile = field(repr=False)

    def radius(self, x):
        x = np.asarray(x, dtype=float)
        y = (x - self.center) @ self.transform.profile_map.T
        return self.beta * np.linalg.norm(y, axis=-1)

    def __call__(self, x):
        return self.alpha * self.profile.value(self.radius(x))

    evaluate = __call__

    @property
    def peak(self) -> float:
        return self.alpha * self.profile.U0


def scaled_profile(xi, eps: float, profile: RadialProfile, V: PotentialField, J: DiffusionField) -> ScaledProfile:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.size != profile.N:
        raise DomainError(f"center has dimension {xi.size}, profile has N={profile.N}")
    z = eps * xi
    v = float(V.value(z))
    if not v > 0:
        raise DomainError(f"V({z}) = {v} is not positive")
    T = diagonalizing_transform(J.value(z), z=z, nu=getattr(J, "nu", 0.0))
    return ScaledProfile(xi, float(eps), v ** (1.0 / (profile.p - 1.0)), math.sqrt(v), T, profile)


def sigma_closed_form(z, profile: RadialProfile, V: PotentialField, J: DiffusionField) -> float:
    """C1 * Gamma(z) with C1 = C0 (1/2 - 1/(p+1))."""
    sample = gamma_eval(z, V, J, profile.N, profile.p)
    return profile.C1 * sample.value


# ----------------------------------------------------------------------------
# frozen-coefficient ground energy
# ----------------------------------------------------------------------------

@dataclass
class FrozenGroundState:
    z: np.ndarray
    u: np.ndarray
    energy: float
    grid: object
    nehari_residual: float
    grad_norm: float
    iterations: int

    @property
    def sigma(self) -> float:
        return self.energy


def frozen_sigma_numeric(z, grid, V: PotentialField, J: DiffusionField, p: float,
                         profile: Optional[RadialProfile] = None, tol: float = 1e-7,
                         max_iter: int = 10000, descent_tol: float = 1e-4) -> FrozenGroundState:
    """Minimize I_z over the discrete Nehari manifold on ``grid``.

    The seed is the explicit frozen ground state centered in the box;
    descent runs with Nehari re-projection after every step and a Newton
    polish finishes the solve.
    """
    from .discretization import DiscreteEnergy, ProblemSpec
    from .solvers import nehari_minimize, nehari_project, newton_refine

    z = np.atleast_1d(np.asarray(z, dtype=float))
    N = grid.N
    if profile is None:
        profile = cached_profile(N, p)
    spec = ProblemSpec(grid, V, J, p)
    energy = DiscreteEnergy(spec, 1.0, "frozen", z=z)
    seed_map = scaled_profile(np.asarray(grid.center), 1.0, profile, _FrozenV(V, z), _FrozenJ(J, z))
    u0 = seed_map(grid.points())
    boundary_ratio = float(np.max(np.abs(u0[grid.boundary_layer_mask()]))) / seed_map.peak
    if boundary_ratio > 1e-6:
        log.warning("box too small for frozen problem at z=%s: boundary/peak=%.2e", z, boundary_ratio)
    rep = nehari_minimize(u0, energy, tol=max(tol, descent_tol), max_iter=max_iter)
    if not rep.converged:
        raise NonConvergenceError(f"frozen Nehari descent stalled at z={z}", last=rep.u)
    ref = newton_refine(rep.u, energy, tol=tol)
    u = ref.u if ref.converged else rep.u
    u = nehari_project(u, energy)
    ev = energy.evaluate(u)
    nres = abs(float(ev.euclidean_gradient @ u))
    norm2 = energy.hv_norm_sq(u)
    if nres > 1e-8 * norm2:
        raise NonConvergenceError(f"Nehari residual {nres:.3e} above tolerance at z={z}", last=u)
    return FrozenGroundState(z, u, ev.value, grid, nres, ev.grad_max, rep.iterations + ref.iterations)


class _FrozenV(PotentialField):
    def __init__(self, base, z):
        self.base, self.z = base, np.asarray(z, dtype=float)
        self.alpha = float(base.value(self.z))

    def value(self, x):
        return float(self.base.value(self.z))

    def gradient(self, x):
        return np.zeros_like(self.z)


class _FrozenJ(DiffusionField):
    def __init__(self, base, z):
        self.base, self.z = base, np.asarray(z, dtype=float)
        self.nu = getattr(base, "nu", 0.0)

    def value(self, x):
        return self.base.value(self.z)


def sigma_directional_derivative(z, i: int, state: FrozenGroundState, V: PotentialField, J: DiffusionField) -> float:
    """1/2 <dJ/dz_i grad v, grad v> + 1/2 dV/dz_i |v|^2 with the computed ground state v."""
    from .discretization import stiffness_matrix

    z = np.atleast_1d(np.asarray(z, dtype=float))
    grid = state.grid
    dJ = np.asarray(J.derivative(z))[i]
    dV = float(np.asarray(V.gradient(z))[i])
    K = stiffness_matrix(grid, dJ)
    v = state.u
    return 0.5 * float(v @ (K @ v)) + 0.5 * dV * grid.cell_volume * float(v @ v)
