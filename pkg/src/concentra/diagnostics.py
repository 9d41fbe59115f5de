"""Checks on computed solutions: maximum-point tracking, concentration series,
a Pucci-Serrin identity residual, the limit identity for the coefficient
derivatives, the barycenter map and the exterior bound.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .discretization import GridDomain, ProblemSpec, build_grid
from .errors import DomainError, PreconditionError
from .fields import check_lambda_well, gamma_values
from .penalty import PenaltyConfig

log = logging.getLogger(__name__)


def _values(u):
    return np.asarray(getattr(u, "values", u), dtype=float).ravel()


# ----------------------------------------------------------------------------
# maximum point
# ----------------------------------------------------------------------------

def global_max_point(u, grid: GridDomain):
    """Refined location of the nodal maximum.

    Returns (x, peak, unique). Ties go to the lexicographically first node
    and set unique=False. Each coordinate is refined by the vertex of the
    parabola through the maximum and its two axis neighbours (boundary
    neighbours count as 0).
    """
    v = _values(u)
    if not np.any(v):
        raise PreconditionError("global_max_point needs a nonzero function")
    k = int(np.argmax(v))
    peak = float(v[k])
    unique = int(np.count_nonzero(v == peak)) == 1
    full = grid.to_full(v)
    idx = np.array(np.unravel_index(k, grid.shape)) + 1
    x = np.array([grid.full_axis(i)[idx[i]] for i in range(grid.N)])
    for i in range(grid.N):
        lo, hi = idx.copy(), idx.copy()
        lo[i] -= 1
        hi[i] += 1
        fm, f0, fp = full[tuple(lo)], full[tuple(idx)], full[tuple(hi)]
        curv = fm - 2.0 * f0 + fp
        if curv < 0:
            x[i] += np.clip(0.5 * grid.h * (fm - fp) / curv, -0.5 * grid.h, 0.5 * grid.h)
    return x, peak, unique


# ----------------------------------------------------------------------------
# barycenter and exterior bound
# ----------------------------------------------------------------------------

def barycenter(u, grid: GridDomain, R: float) -> np.ndarray:
    """Truncated first moment of |u|^2 with chi(x) = x on |x| <= R, R x/|x| beyond."""
    v = _values(u)
    mass = float(np.sum(v * v))
    if not mass > 0:
        raise PreconditionError("barycenter of the zero function is undefined")
    x = grid.points()
    r = np.linalg.norm(x, axis=1)
    scale = np.where(r > R, R / np.maximum(r, 1e-300), 1.0)
    chi = x * scale[:, None]
    return (chi * (v * v)[:, None]).sum(axis=0) / mass


def exterior_bound_check(u, grid: GridDomain, cfg: PenaltyConfig, rtol: float = 1e-6):
    """(ok, max_exterior): max of u over nodes outside Lambda against ell (1 + rtol)."""
    v = _values(u)
    outside = ~cfg.inside(grid.points())
    m = float(np.max(v[outside])) if np.any(outside) else 0.0
    m = max(m, 0.0)
    return bool(m <= cfg.ell * (1.0 + rtol)), m


# ----------------------------------------------------------------------------
# concentration series
# ----------------------------------------------------------------------------

@dataclass
class ConcentrationRecord:
    eps: float
    x: list
    gamma_at_x: float
    scaled_energy: float
    peak: float
    exterior_ok: bool
    max_exterior: float
    distance: float
    h: float
    n: int
    unique: bool
    converged: bool = True
    grad_max: float = 0.0


@dataclass
class ConcentrationSeries:
    eps: list
    records: list
    argmin: list
    gamma_min: float
    sigma_min: float
    warnings: list = field(default_factory=list)

    def trend(self) -> dict:
        d = [r.distance for r in self.records]
        gg = [r.gamma_at_x - self.gamma_min for r in self.records]
        en = [abs(r.scaled_energy / self.sigma_min - 1.0) for r in self.records]
        return {
            "distance": d,
            "distance_non_increasing": bool(all(b <= a for a, b in zip(d, d[1:]))),
            "gamma_gap": gg,
            "gamma_gap_decreasing": bool(all(b < a for a, b in zip(gg, gg[1:]))),
            "energy_relative_gap": en,
            "finest_within_3h": bool(self.records and d[-1] < 3 * self.records[-1].h),
            "finest_energy_within_5pct": bool(self.records and en[-1] < 0.05),
            "exterior_ok_two_finest": bool(len(self.records) >= 2 and all(r.exterior_ok for r in self.records[-2:])),
        }


def grid_for_eps(eps: float, L: float, N: int, beta: float, points_per_width: float,
                 center=None) -> GridDomain:
    """Grid on [-L, L]^N with spacing close to eps / (beta * points_per_width)."""
    h = eps / (beta * points_per_width)
    n = int(round(2.0 * L / h)) + 1
    return build_grid(N, L, n, center)


def concentration_series(spec: ProblemSpec, cfg: PenaltyConfig, eps0: float, levels: int,
                         points_per_width: Optional[float] = None, profile=None, **solver_kw) -> ConcentrationSeries:
    """Solve at eps_j = eps0 2^-j and record the concentration statistics.

    With ``points_per_width`` the grid spacing follows eps (same box);
    otherwise ``spec.grid`` is used for every level.
    """
    from .limit_profile import cached_profile, sigma_closed_form
    from .solvers import argmin_gamma, solve_concentrating

    if levels < 3:
        raise PreconditionError("a concentration series needs at least 3 levels")
    N, p = spec.grid.N, spec.p
    gmin_in, gmin_bd = check_lambda_well(cfg.box, spec.V, spec.J, N, p)
    if not gmin_in < gmin_bd:
        raise PreconditionError(f"min over Lambda of Gamma ({gmin_in:.6g}) is not below its boundary minimum ({gmin_bd:.6g})")
    profile = profile or cached_profile(N, p)
    z_star = argmin_gamma(cfg.box, spec.V, spec.J, N, p)
    g_min = float(gamma_values(z_star, spec.V, spec.J, N, p))
    s_min = sigma_closed_form(z_star, profile, spec.V, spec.J)
    beta = math.sqrt(float(spec.V.value(z_star)))
    series = ConcentrationSeries([], [], z_star.tolist(), g_min, s_min)
    for j in range(levels):
        eps = eps0 * 2.0 ** (-j)
        grid = spec.grid if points_per_width is None else \
            grid_for_eps(eps, spec.grid.L, N, beta, points_per_width, spec.grid.center)
        sp_j = ProblemSpec(grid, spec.V, spec.J, p, cfg)
        rep = solve_concentrating(eps, sp_j, cfg, z_star, profile=profile, **solver_kw)
        if not rep.converged:
            msg = f"level eps={eps} did not converge ({rep.message}); series truncated"
            log.warning(msg)
            series.warnings.append(msg)
            break
        x, peak, unique = global_max_point(rep.u, grid)
        ok, mext = exterior_bound_check(rep.u, grid, cfg)
        rec = ConcentrationRecord(eps, x.tolist(), float(gamma_values(x, spec.V, spec.J, N, p)),
                                  rep.energy / eps**N, peak, ok, mext, float(np.linalg.norm(x - z_star)),
                                  grid.h, grid.n, unique, True, rep.grad_max)
        rec._solution = rep  # kept in memory for follow-up diagnostics
        series.eps.append(eps)
        series.records.append(rec)
    return series


def write_series(series: ConcentrationSeries, csv_path, json_path, header: Optional[list] = None) -> None:
    N = len(series.argmin)
    xs = ["x", "y", "z"][:N]
    with open(csv_path, "w") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        fh.write(",".join(["eps"] + xs + ["gamma_at_x", "scaled_energy", "peak", "exterior_ok"]) + "\n")
        for r in series.records:
            fh.write(",".join([f"{r.eps:.17g}"] + [f"{c:.17g}" for c in r.x] +
                              [f"{r.gamma_at_x:.17g}", f"{r.scaled_energy:.17g}", f"{r.peak:.17g}",
                               str(r.exterior_ok).lower()]) + "\n")
    summary = {
        "argmin_gamma": series.argmin,
        "gamma_min": series.gamma_min,
        "sigma_min": series.sigma_min,
        "records": [{k: v for k, v in asdict(r).items()} for r in series.records],
        "checks": series.trend(),
        "warnings": series.warnings,
    }
    if header:
        summary["_header"] = list(header)
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------------
# Pucci-Serrin identity
# ----------------------------------------------------------------------------

class ZeroField:
    """h = 0."""

    def value(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        N = x.shape[-1]
        return np.zeros(x.shape + (N,))

    def support_radius(self):
        return 0.0

    center = None


@dataclass
class PlateauField:
    """h(x) = chi(|x - c|) e with chi = 1 on r <= r_in, 0 on r >= r_out and a
    C^1 cubic ramp in between."""

    center: np.ndarray
    direction: np.ndarray
    r_in: float
    r_out: float

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        self.direction = np.atleast_1d(np.asarray(self.direction, dtype=float))
        if not 0 <= self.r_in < self.r_out:
            raise DomainError("plateau radii must satisfy 0 <= r_in < r_out")

    def _chi(self, r):
        s = np.clip((r - self.r_in) / (self.r_out - self.r_in), 0.0, 1.0)
        chi = 1.0 - s * s * (3.0 - 2.0 * s)
        dchi = -6.0 * s * (1.0 - s) / (self.r_out - self.r_in)
        return chi, dchi

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.center
        chi, _ = self._chi(np.linalg.norm(d, axis=-1))
        return chi[..., None] * self.direction

    def jacobian(self, x):
        """[..., k, i] = d h^k / d x_i."""
        d = np.asarray(x, dtype=float) - self.center
        r = np.linalg.norm(d, axis=-1)
        _, dchi = self._chi(r)
        grad_chi = (dchi / np.maximum(r, 1e-300))[..., None] * d
        return self.direction[:, None] * grad_chi[..., None, :]

    def support_radius(self):
        return self.r_out


def _cell_fields(u, grid: GridDomain):
    """Multilinear interpolant value and gradient at every cell center."""
    N, h = grid.N, grid.h
    full = grid.to_full(_values(u))
    corners = {}
    for bits in np.ndindex(*(2,) * N):
        sl = tuple(slice(b, grid.n - 1 + b) for b in bits)
        corners[bits] = full[sl]
    uc = sum(corners.values()) / 2**N
    grad = []
    for i in range(N):
        acc = 0.0
        for bits, val in corners.items():
            acc = acc + (val if bits[i] else -val)
        grad.append(acc / (h * 2 ** (N - 1)))
    return uc.ravel(), np.stack([g.ravel() for g in grad], axis=-1)


def pucci_serrin_residual(u, grid: GridDomain, eps: float, V, J, p: float, h_field, tail_rtol: float = 1e-6):
    """|sum_ik int d_i h^k dL/dxi_i d_k u - int[(div h) L + h . d_x L]| by midpoint quadrature.

    L = 1/2 eps^2 <J grad u, grad u> + 1/2 V u^2 - F(u), F(u) = (u+)^{p+1}/(p+1).
    Returns (residual, support_warning).
    """
    v = _values(u)
    xc = grid.cell_centers()
    uc, gu = _cell_fields(v, grid)
    Jc = np.asarray(J.value(xc), dtype=float)
    dJc = np.asarray(J.derivative(xc), dtype=float)           # (cells, k, i, j)
    Vc = np.asarray(V.value(xc), dtype=float)
    dVc = np.asarray(V.gradient(xc), dtype=float)
    hv = h_field.value(xc)                                     # (cells, N)
    Dh = h_field.jacobian(xc)                                  # (cells, k, i)
    Jg = np.einsum("cij,cj->ci", Jc, gu)
    pos = np.maximum(uc, 0.0)
    Lc = 0.5 * eps**2 * np.einsum("ci,ci->c", Jg, gu) + 0.5 * Vc * uc**2 - pos ** (p + 1) / (p + 1)
    dxL = 0.5 * eps**2 * np.einsum("ckij,ci,cj->ck", dJc, gu, gu) + 0.5 * dVc * (uc**2)[:, None]
    term1 = eps**2 * np.einsum("cki,ci,ck->c", Dh, Jg, gu)
    divh = np.einsum("ckk->c", Dh)
    term2 = divh * Lc + np.einsum("ck,ck->c", hv, dxL)
    res = abs(float(np.sum(term1 - term2)) * grid.cell_volume)
    warn = False
    rad = h_field.support_radius()
    if rad > 0 and getattr(h_field, "center", None) is not None:
        outside = np.linalg.norm(grid.points() - h_field.center, axis=1) > rad
        peak = float(np.max(np.abs(v))) if v.size else 0.0
        if np.any(outside) and peak > 0 and float(np.max(np.abs(v[outside]))) > tail_rtol * peak:
            warn = True
    return res, warn


# ----------------------------------------------------------------------------
# limit identity for the coefficient derivatives
# ----------------------------------------------------------------------------

def concentration_gradient_test(u, grid: GridDomain, eps: float, z0, V, J, check_peak: bool = True) -> np.ndarray:
    """-1/2 [ <d_iJ(z0) grad w, grad w> + d_iV(z0) |w|^2 ] for w(y) = u(z0 + eps y).

    The change of variables is exact on the native grid:
    the bracket equals eps^-N [eps^2 <d_iJ grad u, grad u>_h + d_iV <u, u>_h].
    """
    from .discretization import stiffness_matrix

    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    v = _values(u)
    N = grid.N
    if not grid.contains(z0):
        raise DomainError(f"point {z0} lies outside the computational box")
    if check_peak:
        x, _, _ = global_max_point(v, grid)
        beta = math.sqrt(float(V.value(z0)))
        if np.linalg.norm(x - z0) > 3 * eps / beta:
            log.warning("peak %s is farther than 3 eps/beta from %s", x, z0)
    dJ = np.asarray(J.derivative(z0), dtype=float)
    dV = np.asarray(V.gradient(z0), dtype=float)
    mass = grid.cell_volume * float(v @ v)
    out = np.empty(N)
    for i in range(N):
        if np.any(dJ[i]):
            K = stiffness_matrix(grid, dJ[i])
            grad_term = float(v @ (K @ v))
        else:
            grad_term = 0.0
        out[i] = -0.5 * eps ** (-N) * (eps**2 * grad_term + dV[i] * mass)
    return out
