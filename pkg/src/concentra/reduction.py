"""Finite-dimensional reduction around the manifold of rescaled profiles.

Everything lives in the stretched variable y = x/eps, where the functional is

    f_eps(u) = int 1/2 <J(eps y) grad u, grad u> + 1/2 V(eps y) u^2 - F(u),

i.e. the raw discrete energy with eps = 1 and the fields composed with
y -> eps y. For a center xi the profile z_xi(y) = alpha U(beta |A (y - xi)|)
(A = L^{-1}, J(eps xi) = L L^t) carries a correction w, H-orthogonal to the
tangent vectors d z_xi / d xi_j, that kills the gradient of f_eps in the
orthogonal complement. H is the mesh H^1 inner product.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import DiscreteEnergy, GridDomain, ProblemSpec, build_grid, stiffness_matrix
from .errors import ContractionError, DegenerateBasisError, DomainError
from .fields import (
    DiffusionField,
    PotentialField,
    ScaledDiffusion,
    ScaledPotential,
    diagonalizing_transform,
    find_gamma_critical_points,
    inverse_cholesky_derivative,
)
from .limit_profile import RadialProfile, cached_profile

log = logging.getLogger(__name__)

GRAM_COND_MAX = 1e8
H_XI = 1e-3


@dataclass
class ReducedSample:
    xi: np.ndarray
    eps: float
    wnorm: float
    phi: float
    grad: Optional[np.ndarray]
    iterations: int
    residual: float
    orthogonality: float = 0.0
    natural_size: float = 0.0
    w: np.ndarray = field(default=None, repr=False)
    z: np.ndarray = field(default=None, repr=False)

    @property
    def u(self) -> np.ndarray:
        return self.z + self.w


class ReductionProblem:
    """Stretched-variable problem on a fixed grid around ``center`` (y units)."""

    def __init__(self, V: PotentialField, J: DiffusionField, p: float, eps: float, grid: GridDomain,
                 profile: Optional[RadialProfile] = None):
        self.V, self.J, self.p, self.eps = V, J, float(p), float(eps)
        self.grid = grid
        self.N = grid.N
        self.profile = profile or cached_profile(grid.N, p)
        self.Vs = ScaledPotential(V, eps)
        self.Js = ScaledDiffusion(J, eps)
        self.spec = ProblemSpec(grid, self.Vs, self.Js, p)
        self.energy = DiscreteEnergy(self.spec, 1.0, "raw")
        w = grid.cell_volume
        self.H = sp.csr_matrix(stiffness_matrix(grid, np.eye(grid.N)) + w * sp.identity(grid.size))
        self.points = grid.points()

    # profile and tangent vectors --------------------------------------------

    def _coefficients(self, xi):
        s = self.eps * np.asarray(xi, dtype=float)
        v = float(self.V.value(s))
        if not v > 0:
            raise DomainError(f"V({s}) = {v} is not positive")
        T = diagonalizing_transform(self.J.value(s), z=s, nu=getattr(self.J, "nu", 0.0))
        return s, v, T

    def profile_values(self, xi) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        _, v, T = self._coefficients(xi)
        alpha, beta = v ** (1.0 / (self.p - 1.0)), math.sqrt(v)
        q = (self.points - xi) @ T.profile_map.T
        return alpha * self.profile.value(beta * np.linalg.norm(q, axis=1))

    def tangent_vectors(self, xi) -> np.ndarray:
        """Rows d z_xi / d xi_j by the chain rule through alpha, beta, A and the center."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        s, v, T = self._coefficients(xi)
        N, p, eps = self.N, self.p, self.eps
        alpha, beta = v ** (1.0 / (p - 1.0)), math.sqrt(v)
        A = T.profile_map
        L = T.cholesky
        dV = np.asarray(self.V.gradient(s), dtype=float)
        dJ = np.asarray(self.J.derivative(s), dtype=float)
        d = self.points - xi
        q = d @ A.T
        rq = np.linalg.norm(q, axis=1)
        rho = beta * rq
        U = self.profile.value(rho)
        dU = self.profile.derivative(rho)
        safe = np.where(rq > 0, rq, 1.0)
        out = np.empty((N, self.grid.size))
        for j in range(N):
            a_j = eps * alpha / (p - 1.0) * dV[j] / v
            b_j = eps * 0.5 * beta * dV[j] / v
            A_j = eps * inverse_cholesky_derivative(L, dJ[j])
            dq = d @ A_j.T - A[:, j]
            drho = b_j * rq + beta * np.einsum("ki,ki->k", q, dq) / safe
            drho = np.where(rq > 0, drho, 0.0)
            out[j] = a_j * U + alpha * dU * drho
        return out

    def gram(self, T) -> np.ndarray:
        return T @ (self.H @ T.T)

    # correction ---------------------------------------------------------------

    def natural_size(self, xi) -> float:
        s = self.eps * np.atleast_1d(np.asarray(xi, dtype=float))
        dJ = np.linalg.norm(np.asarray(self.J.derivative(s)))
        dV = np.linalg.norm(np.asarray(self.V.gradient(s)))
        return self.eps * dJ + self.eps * dV + self.eps**2

    def h_norm(self, v) -> float:
        return math.sqrt(max(float(v @ (self.H @ v)), 0.0))


def tangent_basis(xi, problem: ReductionProblem) -> np.ndarray:
    """Tangent vectors (N, size); raises DegenerateBasisError on an ill-conditioned Gram matrix."""
    T = problem.tangent_vectors(xi)
    G = problem.gram(T)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > GRAM_COND_MAX:
        raise DegenerateBasisError(f"tangent Gram matrix condition number {cond:.3g} exceeds {GRAM_COND_MAX:g}")
    return T


class Projector:
    """H-orthogonal projector onto the complement of span(T)."""

    def __init__(self, T: np.ndarray, H):
        self.T = T
        self.H = H
        self.HT = np.asarray((H @ T.T))            # (size, N)
        self.G = T @ self.HT                       # Gram
        self._Ginv = np.linalg.inv(self.G)

    def __call__(self, v):
        return v - self.T.T @ (self._Ginv @ (self.HT.T @ v))

    apply = __call__


def _bordered_solve(A, B, rhs, S, rtol: float, maxiter: int):
    """MINRES on [[A, B], [B^t, 0]] [x; lam] = [rhs; 0] with blockdiag(S^-1, C^-1) preconditioning."""
    n, k = B.shape
    SinvB = np.column_stack([S.solve(B[:, j]) for j in range(k)])
    C = B.T @ SinvB
    Cinv = np.linalg.inv(C)

    def mv(v):
        x, lam = v[:n], v[n:]
        return np.concatenate([A @ x + B @ lam, B.T @ x])

    def pre(v):
        return np.concatenate([S.solve(v[:n]), Cinv @ v[n:]])

    op = spla.LinearOperator((n + k, n + k), matvec=mv, dtype=float)
    M = spla.LinearOperator((n + k, n + k), matvec=pre, dtype=float)
    sol, info = spla.minres(op, np.concatenate([rhs, np.zeros(k)]), M=M, rtol=rtol, maxiter=maxiter)
    if info < 0 or not np.all(np.isfinite(sol)):
        raise ContractionError("Krylov breakdown in the bordered correction solve")
    return sol[:n], sol[n:]


def solve_correction(xi, problem: ReductionProblem, tol: float = 1e-10, natural_rtol: float = 1e-3,
                     max_iter: int = 100, krylov_rtol: float = 1e-12) -> ReducedSample:
    """Correction w(eps, xi) by Newton-Kantorovich steps with the Hessian frozen at z_xi."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    z = problem.profile_values(xi)
    T = tangent_basis(xi, problem)
    P = Projector(T, problem.H)
    energy = problem.energy
    S = energy.metric
    A = energy.hessian(z)
    B = P.HT
    size = problem.natural_size(xi)
    w = np.zeros_like(z)
    prev = np.inf
    growing = 0
    it = 0
    for it in range(1, max_iter + 1):
        _, r = energy.value_and_gradient(z + w)
        delta, _ = _bordered_solve(A, B, -r, S, krylov_rtol, 5000)
        delta = P(delta)
        w = w + delta
        nd = problem.h_norm(delta)
        if nd > prev:
            growing += 1
            if growing >= 3:
                raise ContractionError(f"correction updates grow at eps={problem.eps}, xi={xi.tolist()}",
                                       eps=problem.eps, xi=xi)
        else:
            growing = 0
        prev = nd
        if nd < tol or nd < natural_rtol * size:
            break
    else:
        raise ContractionError(f"correction did not settle in {max_iter} iterations at eps={problem.eps}, "
                               f"xi={xi.tolist()}", eps=problem.eps, xi=xi)
    phi, r = energy.value_and_gradient(z + w)
    # projected residual: dual norm of r minus its best fit in span(H T)
    SinvB = np.column_stack([S.solve(B[:, j]) for j in range(B.shape[1])])
    lam = np.linalg.solve(B.T @ SinvB, SinvB.T @ r)
    rp = r - B @ lam
    res = math.sqrt(max(float(rp @ S.solve(rp)), 0.0))
    wn = problem.h_norm(w)
    orth = float(np.max(np.abs(B.T @ w))) / max(wn * max(problem.h_norm(t) for t in T), 1e-300)
    return ReducedSample(xi, problem.eps, wn, phi, None, it, res, orth, size, w, z)


# ----------------------------------------------------------------------------
# reduced functional
# ----------------------------------------------------------------------------

def reduced_energy(xi, problem: ReductionProblem, gradient: bool = True, h_xi: float = H_XI,
                   **kw) -> ReducedSample:
    """Phi(xi) = f_eps(z_xi + w); gradient by centered differences re-solving w."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    sample = solve_correction(xi, problem, **kw)
    if gradient:
        g = np.empty(problem.N)
        for j in range(problem.N):
            e = np.zeros(problem.N)
            e[j] = h_xi
            fp = solve_correction(xi + e, problem, **kw).phi
            fm = solve_correction(xi - e, problem, **kw).phi
            g[j] = (fp - fm) / (2 * h_xi)
        sample.grad = g
    return sample


def reduced_stencil(xi, problem: ReductionProblem, h_xi: float = H_XI, **kw):
    """Value, gradient and Hessian of Phi from the 3^N-point stencil around xi."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    N = problem.N
    vals = {}
    center = None
    for off in itertools.product((-1, 0, 1), repeat=N):
        smp = solve_correction(xi + h_xi * np.asarray(off, dtype=float), problem, **kw)
        vals[off] = smp.phi
        if not any(off):
            center = smp
    g = np.empty(N)
    Hm = np.empty((N, N))
    zero = (0,) * N
    for i in range(N):
        ep = tuple(1 if k == i else 0 for k in range(N))
        em = tuple(-1 if k == i else 0 for k in range(N))
        g[i] = (vals[ep] - vals[em]) / (2 * h_xi)
        Hm[i, i] = (vals[ep] - 2 * vals[zero] + vals[em]) / h_xi**2
        for j in range(i + 1, N):
            def o(a, b):
                t = [0] * N
                t[i], t[j] = a, b
                return tuple(t)
            Hm[i, j] = Hm[j, i] = (vals[o(1, 1)] - vals[o(1, -1)] - vals[o(-1, 1)] + vals[o(-1, -1)]) / (4 * h_xi**2)
    center.grad = g
    return center, g, Hm


@dataclass
class ReducedCriticalPoint:
    xi: np.ndarray
    point: np.ndarray
    classification: str
    sample: ReducedSample = field(repr=False)
    solution: object = field(repr=False)
    newton_steps: int = 0
    grad_norm: float = 0.0


def reduction_grid(center, eps: float, V: PotentialField, J: DiffusionField, n: int,
                   L: Optional[float] = None, width_factor: float = 12.0) -> GridDomain:
    """Grid around ``center`` (y units) wide enough for the profile at eps*center."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    s = eps * center
    beta = math.sqrt(float(V.value(s)))
    lam = float(np.linalg.eigvalsh(np.asarray(J.value(s)))[-1])
    if L is None:
        L = width_factor * math.sqrt(lam) / beta
    return build_grid(center.size, L, n, center)


def reduced_critical_points(box, eps: float, V: PotentialField, J: DiffusionField, p: float, n: int,
                            L: Optional[float] = None, coarse_grid: int = 21, gamma_tol: float = 1e-10,
                            max_newton: int = 20, step_tol: float = 1e-6, polish_tol: float = 1e-8,
                            profile: Optional[RadialProfile] = None, h_xi: float = H_XI) -> list:
    """Critical points of Phi seeded at (critical points of Gamma)/eps.

    ``box`` is given in xi units; Gamma is searched on eps*box. Each seed
    gets its own grid centered at the seed. Converged points are assembled
    into full solutions and polished with Newton on the unreduced functional.
    """
    from .solvers import newton_refine

    box = np.asarray(box, dtype=float).reshape(-1, 2)
    N = box.shape[0]
    crit = find_gamma_critical_points(eps * box, coarse_grid, gamma_tol, V, J, N, p)
    out = []
    for c in crit:
        xi = c.point / eps
        grid = reduction_grid(xi, eps, V, J, n, L)
        prob = ReductionProblem(V, J, p, eps, grid, profile)
        try:
            sample, g, Hm = reduced_stencil(xi, prob, h_xi)
            steps = 0
            for steps in range(1, max_newton + 1):
                try:
                    delta = -np.linalg.solve(Hm, g)
                except np.linalg.LinAlgError:
                    raise ContractionError("singular reduced Hessian")
                accepted = False
                for _ in range(20):
                    trial = xi + delta
                    if not grid.contains(trial, margin=0.5 * grid.L):
                        delta *= 0.5
                        continue
                    s_t, g_t, H_t = reduced_stencil(trial, prob, h_xi)
                    if np.linalg.norm(g_t) < np.linalg.norm(g) or np.linalg.norm(delta) < step_tol:
                        accepted = True
                        break
                    delta *= 0.5
                if not accepted:
                    raise ContractionError("reduced Newton stalled")
                xi, sample, g, Hm = trial, s_t, g_t, H_t
                if np.linalg.norm(delta) < step_tol:
                    break
            else:
                raise ContractionError("reduced Newton iteration cap")
        except (ContractionError, DegenerateBasisError, DomainError) as exc:
            log.warning("reduced Newton from seed %s skipped: %s", c.point, exc)
            continue
        polished = newton_refine(sample.u, prob.energy, tol=polish_tol)
        out.append(ReducedCriticalPoint(xi, eps * xi, c.classification, sample, polished, steps,
                                        float(np.linalg.norm(g))))
    out.sort(key=lambda r: tuple(r.point))
    return out


def write_landscape(samples, path, eps: float, C1: float, gamma_fn, header: Optional[list] = None) -> None:
    """CSV rows ``xi..., phi, grad..., wnorm, iters`` plus C1*Gamma(eps xi) for comparison."""
    if not samples:
        return
    N = samples[0].xi.size
    cols = [f"xi{i + 1}" for i in range(N)] + ["phi"] + [f"grad{i + 1}" for i in range(N)] + \
        ["wnorm", "iters", "c1_gamma"]
    with open(path, "w") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for s in samples:
            grad = s.grad if s.grad is not None else np.full(N, np.nan)
            row = [f"{v:.17g}" for v in s.xi] + [f"{s.phi:.17g}"] + [f"{v:.17g}" for v in grad] + \
                [f"{s.wnorm:.17g}", str(s.iterations), f"{C1 * gamma_fn(eps * s.xi):.17g}"]
            fh.write(",".join(row) + "\n")
