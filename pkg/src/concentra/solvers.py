"""Critical-point solvers for the discrete energies: Nehari scaling and
constrained descent, a string-type mountain-pass estimator, damped Newton,
the concentrating-solution pipeline and multi-start.

All iterations work in the metric S = K + diag(w V) of the quadratic part, so
step sizes are mesh-independent.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from scipy import optimize

from .discretization import DiscreteEnergy, GridFunction, ProblemSpec
from .errors import ConcentraError, PreconditionError
from .fields import gamma_values
from .limit_profile import RadialProfile, cached_profile, scaled_profile
from .penalty import PenaltyConfig

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4


@dataclass
class SolveReport:
    u: np.ndarray
    energy: float
    grad_max: float
    nehari_residual: float
    iterations: int
    converged: bool
    wall_time: float = 0.0
    history: list = field(default_factory=list, repr=False)
    message: str = ""
    grid: object = field(default=None, repr=False)
    extra: dict = field(default_factory=dict, repr=False)

    def grid_function(self) -> GridFunction:
        return GridFunction(self.u, self.grid)


@dataclass
class MountainPassReport:
    path: list = field(repr=False)
    level: float
    node_level: float
    endpoint_energy: float
    iterations: int
    history: list = field(default_factory=list, repr=False)
    top_index: int = 0
    converged: bool = True
    node_history: list = field(default_factory=list, repr=False)


def _nehari_residual(energy: DiscreteEnergy, u, grad=None) -> float:
    if grad is None:
        _, grad = energy.value_and_gradient(u)
    return abs(float(grad @ u))


# ----------------------------------------------------------------------------
# Nehari scaling
# ----------------------------------------------------------------------------

def nehari_scale(u, energy: DiscreteEnergy, rtol: float = 1e-12) -> float:
    """Positive t with DE(tu)[tu] = 0 (maximizer of t -> E(tu))."""
    u = np.asarray(u, dtype=float)
    Q = energy.quadratic(u)
    P = energy.power_moment(u)
    if not P > 0:
        raise PreconditionError("Nehari scaling needs u > 0 on a set of positive measure")
    if Q <= 0:
        raise PreconditionError("quadratic part is not positive")
    t0 = (Q / P) ** (1.0 / (energy.p - 1.0))
    if not energy.penalized:
        return t0

    def phi(t):
        return energy.nonlinear_moment(u, t) - Q

    # M(t) = sum w g(tu) u / t is non-decreasing in t; bracket then solve
    lo, hi = t0, t0
    if phi(t0) > 0:
        while phi(lo) > 0:
            lo *= 0.5
            if lo < 1e-300:
                raise PreconditionError("Nehari scaling bracket failed below")
    else:
        it = 0
        while phi(hi) < 0:
            hi *= 2.0
            it += 1
            if it > 200:
                raise PreconditionError("Nehari scaling diverges: nonlinear part saturates below the quadratic part")
    if lo == hi:
        return lo
    return optimize.brentq(phi, lo, hi, xtol=1e-300, rtol=max(rtol, 4 * np.finfo(float).eps), maxiter=500)


def nehari_project(u, energy: DiscreteEnergy) -> np.ndarray:
    return nehari_scale(u, energy) * np.asarray(u, dtype=float)


# ----------------------------------------------------------------------------
# constrained descent
# ----------------------------------------------------------------------------

def nehari_minimize(seed, energy: DiscreteEnergy, tol: float = 1e-6, max_iter: int = 10000,
                    step0: float = 1.0) -> SolveReport:
    """Metric-preconditioned descent on the Nehari manifold.

    Each trial point u - a S^{-1} grad E(u) is projected back by Nehari
    scaling; a follows a Barzilai-Borwein estimate and Armijo halving.
    Converged when the mesh gradient max-norm is at most ``tol``.
    """
    t_start = time.perf_counter()
    S = energy.metric
    u = nehari_project(seed, energy)
    e, g = energy.value_and_gradient(u)
    hist = [e]
    step = step0
    s_prev = y_prev = None
    converged = False
    message = "iteration cap"
    it = 0
    for it in range(1, max_iter + 1):
        gmax = float(np.max(np.abs(g))) / energy.w
        if gmax <= tol:
            converged = True
            message = "converged"
            it -= 1
            break
        d = S.solve(g)
        slope = float(g @ d)
        if s_prev is not None:
            sy = float(s_prev @ y_prev)
            if sy > 0:
                ss = float(s_prev @ (S.S @ s_prev))
                step = min(max(ss / sy, 1e-4), 1e4)
        a = step
        accepted = False
        while a > 1e-14:
            trial = u - a * d
            try:
                trial = nehari_project(trial, energy)
            except PreconditionError:
                a *= 0.5
                continue
            e_try, g_try = energy.value_and_gradient(trial)
            if e_try <= e - ARMIJO_C * a * slope:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            message = "line search stagnated"
            break
        s_prev, y_prev = trial - u, g_try - g
        u, e, g = trial, e_try, g_try
        hist.append(e)
    gmax = float(np.max(np.abs(g))) / energy.w
    converged = converged or gmax <= tol
    return SolveReport(u, e, gmax, _nehari_residual(energy, u, g), it, converged,
                       time.perf_counter() - t_start, hist, message, energy.grid)


# ----------------------------------------------------------------------------
# Newton
# ----------------------------------------------------------------------------

def _dual_norm(S, g) -> float:
    return math.sqrt(max(float(g @ S.solve(g)), 0.0))


def newton_refine(u, energy: DiscreteEnergy, tol: float = 1e-9, max_steps: int = 50,
                  krylov_rtol: float = 1e-11, krylov_maxiter: int = 2000) -> SolveReport:
    """Damped Newton with S-preconditioned MINRES (handles indefinite Hessians).

    A step is accepted only when the dual norm of the gradient decreases.
    """
    t_start = time.perf_counter()
    S = energy.metric
    M = S.operator()
    u = np.array(u, dtype=float)
    e, g = energy.value_and_gradient(u)
    dn = _dual_norm(S, g)
    hist = [dn]
    converged = False
    message = "step cap"
    steps = 0
    for steps in range(max_steps + 1):
        gmax = float(np.max(np.abs(g))) / energy.w
        if gmax <= tol:
            converged = True
            message = "converged"
            break
        if steps == max_steps:
            break
        H = energy.hessian(u)
        delta, info = spla.minres(H, -g, M=M, rtol=krylov_rtol, maxiter=krylov_maxiter)
        if not np.all(np.isfinite(delta)):
            message = "Krylov breakdown"
            break
        a = 1.0
        accepted = False
        for _ in range(30):
            trial = u + a * delta
            e_t, g_t = energy.value_and_gradient(trial)
            dn_t = _dual_norm(S, g_t)
            if dn_t < dn:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            message = "no decrease along Newton direction"
            break
        u, e, g, dn = trial, e_t, g_t, dn_t
        hist.append(dn)
    gmax = float(np.max(np.abs(g))) / energy.w
    return SolveReport(u, e, gmax, _nehari_residual(energy, u, g), steps, converged,
                       time.perf_counter() - t_start, hist, message, energy.grid)


# ----------------------------------------------------------------------------
# mountain pass
# ----------------------------------------------------------------------------

def negative_endpoint(bump, energy: DiscreteEnergy, factor: float = 2.0) -> np.ndarray:
    """Scale ``bump`` until the energy is negative."""
    t = nehari_scale(bump, energy) * factor
    for _ in range(200):
        if energy.value(t * bump) < 0:
            return t * np.asarray(bump, dtype=float)
        t *= 2.0
    raise PreconditionError("could not reach negative energy by scaling the bump")


def _polyline_max(path, energies, energy) -> float:
    """Max of E over the two segments adjacent to the top node."""
    top = int(np.argmax(energies))
    best = energies[top]
    for j in (top - 1, top + 1):
        if 0 <= j < len(path):
            a, b = path[top], path[j]
            res = optimize.minimize_scalar(lambda s: -energy.value((1 - s) * a + s * b), bounds=(0.0, 1.0),
                                           method="bounded", options={"xatol": 1e-10})
            best = max(best, -float(res.fun))
    return best


def _s_norm(S, v) -> float:
    return math.sqrt(max(float(v @ (S.S @ v)), 0.0))


def _reparametrize(path, S):
    """Redistribute interior nodes to equal S-arclength along the polyline."""
    K = len(path) - 1
    seg = np.array([math.sqrt(max(float((b - a) @ (S.S @ (b - a))), 0.0)) for a, b in zip(path[:-1], path[1:])])
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return path
    targets = total * np.arange(K + 1) / K
    new = [path[0]]
    j = 0
    for tgt in targets[1:-1]:
        while j < K - 1 and s[j + 1] < tgt:
            j += 1
        lam = (tgt - s[j]) / seg[j] if seg[j] > 0 else 0.0
        new.append((1 - lam) * path[j] + lam * path[j + 1])
    new.append(path[-1])
    return new


def mountain_pass_level(endpoint, energy: DiscreteEnergy, K: int = 20, max_sweeps: int = 2000,
                        stall_rtol: float = 1e-6, stall_window: int = 10, step: float = 0.5) -> MountainPassReport:
    """Deform the path 0 -> endpoint to lower its maximum (string iteration).

    Interior nodes move along the S-gradient component transverse to the path,
    then are redistributed to equal S-arclength. The monitored level is the
    maximum of E over the two segments adjacent to the top node; a sweep that
    raises it is undone and the step halved, so the level never increases.
    Stabilized when the level drops by less than ``stall_rtol`` over
    ``stall_window`` sweeps or no step of size >= 1e-8 lowers it.
    """
    endpoint = np.asarray(endpoint, dtype=float)
    e_end = energy.value(endpoint)
    if not e_end < 0:
        raise PreconditionError(f"endpoint energy {e_end:.6g} is not negative")
    S = energy.metric
    path = [(i / K) * endpoint for i in range(K + 1)]
    energies = [energy.value(v) for v in path]
    level = _polyline_max(path, energies, energy)
    hist = [level]
    node_hist = [max(energies)]
    sweeps = 0
    converged = False
    directions = None
    while sweeps < max_sweeps:
        if directions is None:
            # transverse S-gradients, frozen until a sweep is accepted
            directions = []
            for i in range(1, K):
                _, g = energy.value_and_gradient(path[i])
                d = S.solve(g)
                tau = path[i + 1] - path[i - 1]
                Stau = S.S @ tau
                tt = float(tau @ Stau)
                if tt > 0:
                    d = d - (float(d @ Stau) / tt) * tau
                directions.append(d)
            ds = _s_norm(S, endpoint) / K
        new = [path[0]]
        for i in range(1, K):
            disp = step * directions[i - 1]
            nd = _s_norm(S, disp)
            if nd > ds:
                # trust region: a node moves at most one mean segment length
                disp *= ds / nd
            new.append(path[i] - disp)
        new.append(path[-1])
        new = _reparametrize(new, S)
        new_e = [energy.value(v) for v in new]
        new_level = _polyline_max(new, new_e, energy)
        if not np.isfinite(new_level) or new_level > level * (1 + 1e-14) + 1e-300:
            step *= 0.5
            if step < 1e-8:
                converged = sweeps > 0
                break
            continue
        path, energies, level = new, new_e, new_level
        directions = None
        hist.append(level)
        node_hist.append(max(energies))
        sweeps += 1
        step = min(step * 1.2, 1.0)
        if len(hist) > stall_window:
            old = hist[-1 - stall_window]
            if old - level < stall_rtol * abs(level):
                converged = True
                break
    top = int(np.argmax(energies))
    refined = _polyline_max(path, energies, energy)
    return MountainPassReport(path, refined, max(energies), e_end, sweeps, hist, top, converged, node_hist)


# ----------------------------------------------------------------------------
# concentrating solutions
# ----------------------------------------------------------------------------

def argmin_gamma(box, V, J, N: int, p: float, samples: int = 41) -> np.ndarray:
    """Minimizer of Gamma on a box: dense scan then bounded quasi-Newton polish."""
    from .fields import _gamma_value_grad

    box = np.asarray(box, dtype=float).reshape(N, 2)
    axes = [np.linspace(lo, hi, samples) for lo, hi in box]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    vals = gamma_values(pts, V, J, N, p)
    z0 = pts[int(np.argmin(vals))]

    def fun(z):
        v, gr = _gamma_value_grad(z, V, J, N, p)
        return v, gr

    res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=[tuple(b) for b in box],
                            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500})
    return np.asarray(res.x, dtype=float)


def concentrating_seed(eps: float, spec: ProblemSpec, seed_point, profile: Optional[RadialProfile] = None) -> np.ndarray:
    """eps-scaled explicit profile centered at ``seed_point`` on the physical grid."""
    if profile is None:
        profile = cached_profile(spec.grid.N, spec.p)
    seed_point = np.atleast_1d(np.asarray(seed_point, dtype=float))
    sp_ = scaled_profile(seed_point / eps, eps, profile, spec.V, spec.J)
    return sp_(spec.grid.points() / eps)


def solve_concentrating(eps: float, spec: ProblemSpec, cfg: PenaltyConfig, seed_point=None,
                        profile: Optional[RadialProfile] = None, descent_tol: float = 1e-4,
                        newton_tol: float = 1e-9, max_iter: int = 10000,
                        energy: Optional[DiscreteEnergy] = None) -> SolveReport:
    """Penalized solve from the Nehari-projected eps-scaled profile at ``seed_point``.

    Descent stops at the loose ``descent_tol``; the spike then drifts only
    along a nearly flat translation mode, which Newton resolves in a few steps.
    """
    t_start = time.perf_counter()
    N, p = spec.grid.N, spec.p
    if seed_point is None:
        seed_point = argmin_gamma(cfg.box, spec.V, spec.J, N, p)
    seed_point = np.atleast_1d(np.asarray(seed_point, dtype=float))
    if not bool(cfg.inside(seed_point)):
        raise PreconditionError(f"seed point {seed_point} lies outside Lambda")
    beta = math.sqrt(float(spec.V.value(seed_point)))
    width = beta * cfg.distance_to_boundary(seed_point) / eps
    if width < 5.0:
        raise PreconditionError(f"eps={eps} too large: beta*dist(seed, boundary)/eps = {width:.3g} < 5")
    if energy is None:
        energy = DiscreteEnergy(spec, eps, "penalized", penalty=cfg)
    u0 = concentrating_seed(eps, spec, seed_point, profile)
    rep = nehari_minimize(u0, energy, tol=descent_tol, max_iter=max_iter)
    ref = newton_refine(rep.u, energy, tol=newton_tol)
    if ref.converged or ref.grad_max < rep.grad_max:
        u, e, gmax = ref.u, ref.energy, ref.grad_max
    else:
        u, e, gmax = rep.u, rep.energy, rep.grad_max
    converged = gmax <= newton_tol or (rep.converged and ref.converged)
    msg = f"descent: {rep.message} ({rep.iterations} it); newton: {ref.message} ({ref.iterations} steps)"
    log.info("eps=%g seed=%s: %s, |grad|=%.3e", eps, seed_point, msg, gmax)
    return SolveReport(u, e, gmax, _nehari_residual(energy, u), rep.iterations + ref.iterations, converged,
                       time.perf_counter() - t_start, rep.history + ref.history, msg, spec.grid,
                       {"eps": eps, "seed_point": seed_point, "descent": rep, "newton": ref})


def lambda_radius(cfg: PenaltyConfig) -> float:
    """Largest |x| over the corners of Lambda (barycenter truncation radius)."""
    corners = np.array(np.meshgrid(*cfg.box, indexing="ij")).reshape(cfg.N, -1).T
    return float(np.max(np.linalg.norm(corners, axis=1)))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CONCENTRA_THREADS", "1")))
    except ValueError:
        return 1


def multi_start(seed_points, eps: float, spec: ProblemSpec, cfg: PenaltyConfig,
                profile: Optional[RadialProfile] = None, radius: Optional[float] = None, **kw) -> list:
    """Distinct concentrating solutions from several seeds, sorted by energy.

    Duplicates: relative energy gap below 1e-6 and barycenters closer than 2h.
    """
    from .diagnostics import barycenter

    seeds = [np.atleast_1d(np.asarray(s, dtype=float)) for s in seed_points]
    if not seeds:
        raise PreconditionError("multi_start needs at least one seed")
    energy = DiscreteEnergy(spec, eps, "penalized", penalty=cfg)
    energy.metric  # factor once, shared read-only
    if radius is None:
        radius = lambda_radius(cfg)

    def run(s):
        try:
            return solve_concentrating(eps, spec, cfg, s, profile=profile, energy=energy, **kw)
        except ConcentraError as exc:
            log.warning("seed %s failed: %s", s, exc)
            return None

    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, seeds))
    else:
        reports = [run(s) for s in seeds]
    h = spec.grid.h
    distinct = []
    for rep in reports:
        if rep is None or not rep.converged:
            if rep is not None:
                log.warning("seed %s did not converge (%s); skipped", rep.extra.get("seed_point"), rep.message)
            continue
        rep.extra["barycenter"] = barycenter(rep.u, spec.grid, radius)
        dup = False
        for other in distinct:
            de = abs(rep.energy - other.energy) / max(abs(other.energy), 1e-300)
            db = float(np.linalg.norm(rep.extra["barycenter"] - other.extra["barycenter"]))
            if de < 1e-6 and db < 2 * h:
                dup = True
                break
        if not dup:
            distinct.append(rep)
    distinct.sort(key=lambda r: (r.energy, tuple(r.extra["barycenter"])))
    return distinct
