"""Tensor-grid discretization of the energies on a box with homogeneous
Dirichlet data.

The gradient term uses, in every cell, the 2^N one-sided corner gradients of
the nodal values weighted equally (vertex quadrature) with J sampled at the
cell center; the mass and nonlinear terms are lumped at the nodes. Energy,
gradient and Hessian come from the same discrete sum, so they are exactly
consistent.
"""
from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import ConfigError, DomainError, GridSizeError
from .fields import DiffusionField, PotentialField, check_exponent
from .penalty import PenaltyConfig

log = logging.getLogger(__name__)

DEFAULT_MEMORY_CAP = 4.0e9


def _memory_cap() -> float:
    env = os.environ.get("CONCENTRA_MEMORY_CAP")
    return float(env) if env else DEFAULT_MEMORY_CAP


@dataclass(frozen=True)
class GridDomain:
    """Uniform grid on center + [-L, L]^N with n nodes per axis."""

    N: int
    L: float
    n: int
    center: tuple = None

    def __post_init__(self):
        if self.center is None:
            object.__setattr__(self, "center", (0.0,) * self.N)
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.n - 1)

    @property
    def cell_volume(self) -> float:
        return self.h ** self.N

    @property
    def m(self) -> int:
        """Interior nodes per axis."""
        return self.n - 2

    @property
    def size(self) -> int:
        return self.m ** self.N

    @property
    def shape(self) -> tuple:
        return (self.m,) * self.N

    @property
    def cell_count(self) -> int:
        return (self.n - 1) ** self.N

    def axis(self, i: int = 0) -> np.ndarray:
        """Interior node coordinates along axis i."""
        return self.center[i] - self.L + self.h * np.arange(1, self.n - 1)

    def full_axis(self, i: int = 0) -> np.ndarray:
        return self.center[i] - self.L + self.h * np.arange(self.n)

    def points(self) -> np.ndarray:
        """Interior node coordinates, shape (size, N), lexicographic (axis 0 slowest)."""
        axes = [self.axis(i) for i in range(self.N)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def cell_centers(self) -> np.ndarray:
        axes = [self.full_axis(i)[:-1] + 0.5 * self.h for i in range(self.N)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def boundary_layer_mask(self) -> np.ndarray:
        """Interior nodes adjacent to the Dirichlet boundary."""
        idx = np.indices(self.shape).reshape(self.N, -1)
        return np.any((idx == 0) | (idx == self.m - 1), axis=0)

    def as_array(self, u) -> np.ndarray:
        return np.asarray(u).reshape(self.shape)

    def to_full(self, u) -> np.ndarray:
        """Embed interior values into the n^N array with zero boundary."""
        full = np.zeros((self.n,) * self.N)
        full[(slice(1, -1),) * self.N] = self.as_array(u)
        return full

    def box(self) -> np.ndarray:
        c = np.asarray(self.center)
        return np.stack([c - self.L, c + self.L], axis=1)

    def contains(self, x, margin: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center)
        return bool(np.all(np.abs(x - c) <= self.L - margin))

    def memory_estimate(self) -> float:
        # stiffness, factorization fill and a handful of work vectors
        return float(self.size) * (3**self.N * 12 * 4 + 64 * 8)


def build_grid(N: int, L: float, n: int, center=None, memory_cap: Optional[float] = None) -> GridDomain:
    if N not in (1, 2, 3):
        raise DomainError(f"dimension N={N} not supported (1, 2 or 3)")
    if n < 8:
        raise GridSizeError(f"n={n} nodes per axis is below the minimum of 8")
    if not L > 0:
        raise DomainError(f"half-width L={L} must be positive")
    grid = GridDomain(int(N), float(L), int(n), center)
    cap = _memory_cap() if memory_cap is None else memory_cap
    if grid.memory_estimate() > cap:
        raise GridSizeError(f"grid N={N}, n={n} needs ~{grid.memory_estimate():.3g} bytes, cap {cap:.3g}")
    return grid


# ----------------------------------------------------------------------------
# stiffness assembly
# ----------------------------------------------------------------------------

def _interior_index(grid: GridDomain) -> np.ndarray:
    """Map from full lexicographic node index to interior index (-1 on the boundary)."""
    n, N = grid.n, grid.N
    full = -np.ones((n,) * N, dtype=np.int64)
    full[(slice(1, -1),) * N] = np.arange(grid.size).reshape(grid.shape)
    return full.ravel()


def _cell_corner_nodes(grid: GridDomain):
    """Full node indices of every corner of every cell, dict corner-bits -> (cells,)."""
    n, N = grid.n, grid.N
    base = np.indices((n - 1,) * N).reshape(N, -1)
    strides = n ** np.arange(N - 1, -1, -1)
    out = {}
    for bits in itertools.product((0, 1), repeat=N):
        out[bits] = ((base + np.asarray(bits)[:, None]) * strides[:, None]).sum(axis=0)
    return out


def stiffness_matrix(grid: GridDomain, J) -> sp.csr_matrix:
    """Matrix of u -> sum_cells h^N 2^-N sum_corners <J g_c, g_c> (no factor 1/2).

    ``J`` is a constant (N, N) matrix, a per-cell array (cells, N, N) or a
    DiffusionField sampled at the cell centers. Symmetric J is assumed; J need
    not be definite (derivative fields are accepted).
    """
    N, h = grid.N, grid.h
    if isinstance(J, DiffusionField):
        Jc = np.asarray(J.value(grid.cell_centers()), dtype=float)
    else:
        Jc = np.asarray(J, dtype=float)
    const = Jc.ndim == 2
    if Jc.shape[-2:] != (N, N):
        raise DomainError(f"J has shape {Jc.shape}, expected (..., {N}, {N})")
    imap = _interior_index(grid)
    corners = _cell_corner_nodes(grid)
    w = grid.cell_volume / 2**N / h**2
    size = grid.size
    K = sp.csr_matrix((size, size))
    rows_all, cols_all, vals_all = [], [], []
    for bits, node in corners.items():
        # one-sided difference along each axis from this corner
        diffs = []
        for i in range(N):
            flipped = list(bits)
            flipped[i] = 1 - bits[i]
            other = corners[tuple(flipped)]
            sgn = 1.0 if bits[i] == 0 else -1.0
            diffs.append((imap[other], imap[node], sgn))
        for i in range(N):
            for j in range(N):
                cij = Jc[i, j] if const else Jc[:, i, j]
                if const and cij == 0.0:
                    continue
                if not const and not np.any(cij):
                    continue
                ai, bi, si = diffs[i]
                aj, bj, sj = diffs[j]
                for ri, rs in ((ai, si), (bi, -si)):
                    for cj, cs in ((aj, sj), (bj, -sj)):
                        val = w * rs * cs * cij
                        keep = (ri >= 0) & (cj >= 0)
                        if const:
                            rows_all.append(ri[keep])
                            cols_all.append(cj[keep])
                            vals_all.append(np.full(int(keep.sum()), val))
                        else:
                            rows_all.append(ri[keep])
                            cols_all.append(cj[keep])
                            vals_all.append(val[keep])
        if sum(r.size for r in rows_all) > 4_000_000:
            K = K + sp.csr_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                                  shape=(size, size))
            rows_all, cols_all, vals_all = [], [], []
    if rows_all:
        K = K + sp.csr_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                              shape=(size, size))
    K = sp.csr_matrix(K)
    K.sum_duplicates()
    K.sort_indices()
    return kernels.active.as_csr(K) if kernels.BACKEND == "compiled" else K


# ----------------------------------------------------------------------------
# problem and energy
# ----------------------------------------------------------------------------

@dataclass
class ProblemSpec:
    grid: GridDomain
    V: PotentialField
    J: DiffusionField
    p: float
    penalty: Optional[PenaltyConfig] = None

    def __post_init__(self):
        check_exponent(self.grid.N, self.p)


@dataclass
class GridFunction:
    """Interior nodal values on ``grid`` (Dirichlet zero on the boundary)."""

    values: np.ndarray
    grid: GridDomain

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float).ravel()
        if self.values.size != self.grid.size:
            raise DomainError(f"{self.values.size} values for a grid with {self.grid.size} interior nodes")

    def save_binary(self, path, header: Optional[list[str]] = None) -> None:
        self.values.astype("<f8").tofile(path)
        g = self.grid
        with open(str(path) + ".meta", "w") as fh:
            for line in header or []:
                fh.write(f"# {line}\n")
            fh.write(f"{g.N} {g.n} {g.L!r} ordering=lex\n")
            if any(c != 0.0 for c in g.center):
                fh.write("center " + " ".join(repr(c) for c in g.center) + "\n")

    @classmethod
    def load_binary(cls, path) -> "GridFunction":
        center = None
        with open(str(path) + ".meta") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
        N, n, L, order = lines[0].split()
        if order != "ordering=lex":
            raise ValueError(f"unsupported ordering {order}")
        for ln in lines[1:]:
            if ln.startswith("center"):
                center = tuple(float(x) for x in ln.split()[1:])
        grid = GridDomain(int(N), float(L), int(n), center)
        return cls(np.fromfile(path, dtype="<f8"), grid)

    def save_csv(self, path, header: Optional[list[str]] = None) -> None:
        g = self.grid
        if g.N > 2:
            raise DomainError("CSV export is available for N <= 2 only")
        pts = g.points()
        cols = ["x", "y"][: g.N] + ["u"]
        with open(path, "w") as fh:
            for line in header or []:
                fh.write(f"# {line}\n")
            fh.write(",".join(cols) + "\n")
            for x, v in zip(pts, self.values):
                fh.write(",".join(f"{c:.10g}" for c in x) + f",{v:.17g}\n")


@dataclass
class FunctionalEval:
    value: float
    euclidean_gradient: np.ndarray
    gradient: np.ndarray
    hessian_action: Optional[Callable] = field(default=None, repr=False)

    @property
    def grad_max(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


class MetricSolver:
    """Solves S x = b for the SPD quadratic part S (direct for N <= 2)."""

    def __init__(self, S):
        self.S = sp.csc_matrix(S)
        self.direct = S.shape[0] <= 300_000 and self._dim_hint(S) <= 2
        if self.direct:
            self._lu = spla.splu(self.S, permc_spec="COLAMD")
        else:
            d = self.S.diagonal()
            self._pre = spla.LinearOperator(S.shape, matvec=lambda x: x / d)

    @staticmethod
    def _dim_hint(S):
        nnz_row = S.nnz / max(S.shape[0], 1)
        return 3 if nnz_row > 9.5 else 2

    def solve(self, b):
        if self.direct:
            return self._lu.solve(np.asarray(b, dtype=float))
        x, info = spla.cg(self.S, b, rtol=1e-12, maxiter=5000, M=self._pre)
        return x

    def operator(self):
        return spla.LinearOperator(self.S.shape, matvec=self.solve, dtype=float)


class DiscreteEnergy:
    """Discrete functional in one of the modes 'raw', 'penalized', 'frozen'.

    value: 1/2 eps^2 u.K_J u + sum_i h^N (1/2 V_i u_i^2 - Phi(x_i, u_i))
    """

    def __init__(self, spec: ProblemSpec, eps: float, mode: str = "raw", z=None,
                 penalty: Optional[PenaltyConfig] = None):
        grid = spec.grid
        self.spec, self.grid, self.mode = spec, grid, mode
        self.p = float(spec.p)
        self.w = grid.cell_volume
        pts = grid.points()
        if mode == "frozen":
            if z is None:
                raise ConfigError("frozen mode needs a point z")
            self.z = np.atleast_1d(np.asarray(z, dtype=float))
            self.eps = 1.0
            Jz = np.asarray(spec.J.value(self.z), dtype=float)
            K = stiffness_matrix(grid, Jz)
            self.wv = np.full(grid.size, self.w * float(spec.V.value(self.z)))
        elif mode in ("raw", "penalized"):
            self.z = None
            self.eps = float(eps)
            K = stiffness_matrix(grid, spec.J) * self.eps**2
            self.wv = self.w * np.asarray(spec.V.value(pts), dtype=float)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        if not np.all(np.isfinite(self.wv)):
            raise DomainError("potential is not finite on the grid")
        self.K = kernels.active.as_csr(sp.csr_matrix(K))
        self.penalized = mode == "penalized"
        cfg = penalty if penalty is not None else spec.penalty
        if self.penalized:
            if cfg is None:
                raise ConfigError("penalized mode requires a PenaltyConfig")
            self.cfg = cfg
            self.inside = np.ascontiguousarray(cfg.inside(pts), dtype=np.uint8)
            self.ell, self.slope = float(cfg.ell), float(cfg.slope)
        else:
            self.cfg = None
            self.inside = np.ones(grid.size, dtype=np.uint8)
            self.ell, self.slope = np.inf, 0.0
        self._metric = None
        self._plain = None

    # core evaluations -------------------------------------------------------

    def _check(self, u):
        u = np.ascontiguousarray(u, dtype=float)
        if u.shape != (self.grid.size,):
            raise DomainError(f"grid function has shape {u.shape}, expected ({self.grid.size},)")
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("non-finite values in grid function")
        return u

    def value(self, u) -> float:
        u = self._check(u)
        ell = self.ell if np.isfinite(self.ell) else 0.0
        return kernels.active.energy_only(self.K, u, self.wv, self.w, self.inside, self.penalized,
                                          self.p, ell, self.slope)

    def value_and_gradient(self, u):
        """Energy and Euclidean gradient (nodal partial derivatives)."""
        u = self._check(u)
        grad = np.empty_like(u)
        ell = self.ell if np.isfinite(self.ell) else 0.0
        e = kernels.active.fused_energy_gradient(self.K, u, self.wv, self.w, self.inside, self.penalized,
                                                 self.p, ell, self.slope, grad)
        return e, grad

    def curvature(self, u) -> np.ndarray:
        u = self._check(u)
        out = np.empty_like(u)
        ell = self.ell if np.isfinite(self.ell) else 0.0
        kernels.active.nonlinear_curvature(u, self.w, self.inside, self.penalized, self.p, ell, self.slope, out)
        return out

    def hessian(self, u) -> sp.csr_matrix:
        """Sparse Hessian K + diag(wv - w g'(u))."""
        return sp.csr_matrix(self.K + sp.diags(self.wv - self.curvature(u)))

    def evaluate(self, u, with_hessian: bool = False) -> FunctionalEval:
        e, g = self.value_and_gradient(u)
        hv = None
        if with_hessian:
            H = self.hessian(u)
            hv = H.dot
        return FunctionalEval(e, g, g / self.w, hv)

    def nonlinear_moment(self, u, t: float = 1.0) -> float:
        """sum_i w g(x_i, t u_i) u_i / t."""
        ell = self.ell if np.isfinite(self.ell) else 0.0
        return self.w * kernels.active.nonlinear_moment(np.ascontiguousarray(u, dtype=float), self.inside,
                                                         self.penalized, self.p, ell, self.slope, float(t))

    # quadratic part and metric ----------------------------------------------

    def quadratic(self, u) -> float:
        """Q(u) = eps^2 u.K_J u + sum w V u^2."""
        return float(u @ (self.K @ u)) + float(np.sum(self.wv * u * u))

    def power_moment(self, u) -> float:
        """P(u) = sum w (u+)^{p+1}."""
        return self.w * float(np.sum(np.maximum(u, 0.0) ** (self.p + 1)))

    @property
    def metric_matrix(self):
        return sp.csr_matrix(self.K + sp.diags(self.wv))

    @property
    def metric(self) -> MetricSolver:
        if self._metric is None:
            self._metric = MetricSolver(self.metric_matrix)
        return self._metric

    def plain_stiffness(self):
        if self._plain is None:
            self._plain = stiffness_matrix(self.grid, np.eye(self.grid.N))
        return self._plain

    def hv_norm_sq(self, u) -> float:
        return self.quadratic(u)


def functional_eval(u, eps: float, spec: ProblemSpec, mode: str = "raw", z=None,
                    penalty: Optional[PenaltyConfig] = None, with_hessian: bool = False) -> FunctionalEval:
    """One-shot evaluation; builds the operator each call (use DiscreteEnergy in loops)."""
    if isinstance(u, GridFunction):
        u = u.values
    return DiscreteEnergy(spec, eps, mode, z=z, penalty=penalty).evaluate(u, with_hessian=with_hessian)


def hv_norm(u, V: PotentialField, grid: Optional[GridDomain] = None) -> float:
    """(sum grad-form + sum h^N V u^2)^{1/2} with the same quadrature as the energy."""
    if isinstance(u, GridFunction):
        grid, u = u.grid, u.values
    if grid is None:
        raise DomainError("hv_norm needs a grid")
    u = np.asarray(u, dtype=float)
    K = stiffness_matrix(grid, np.eye(grid.N))
    Vx = np.asarray(V.value(grid.points()), dtype=float)
    q = float(u @ (K @ u)) + grid.cell_volume * float(np.sum(Vx * u * u))
    return float(np.sqrt(max(q, 0.0)))
