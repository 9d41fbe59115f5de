"""Coefficient fields V and J, the concentration function Gamma and the
Cholesky-based diagonalizing transform.

All field evaluators are vectorized: a point argument of shape ``(..., N)``
returns values of shape ``(...)`` for V, ``(..., N, N)`` for J, with
derivative axes appended (gradient ``(..., N)``, Hessian ``(..., N, N)``) or,
for J, prepended after the batch axes (``(..., N, N, N)`` with index order
``[k, i, j] = d J_ij / d z_k``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, EllipticityError

log = logging.getLogger(__name__)

DEGENERACY_RTOL = 1e-6


def _fd_step(z):
    return 1e-5 * (1.0 + np.linalg.norm(z, axis=-1, keepdims=True))


def check_exponent(N: int, p: float) -> None:
    """Raise DomainError unless 1 < p < (N+2)/(N-2) (no upper bound for N <= 2)."""
    if not p > 1.0:
        raise DomainError(f"exponent p={p} must exceed 1")
    if N >= 3 and not p < (N + 2.0) / (N - 2.0):
        raise DomainError(f"exponent p={p} is not subcritical for N={N}: need p < {(N + 2.0) / (N - 2.0)}")


# --------------------------------------------------------------------------
# potential V
# --------------------------------------------------------------------------

class PotentialField:
    """Scalar potential V with declared lower bound ``alpha``."""

    alpha: float = 0.0

    def value(self, z):
        raise NotImplementedError

    def gradient(self, z):
        raise NotImplementedError

    def hessian(self, z):
        # centered differences of the analytic gradient
        z = np.asarray(z, dtype=float)
        N = z.shape[-1]
        h = _fd_step(z)
        out = np.empty(z.shape + (N,))
        for k in range(N):
            e = np.zeros(N)
            e[k] = 1.0
            out[..., k, :] = (self.gradient(z + h * e) - self.gradient(z - h * e)) / (2 * h)
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def validate(self, points) -> None:
        v = np.asarray(self.value(points))
        if not np.all(np.isfinite(v)):
            raise DomainError("assumption (V) violated: non-finite potential value")
        if np.any(v <= 0):
            raise DomainError("assumption (V) violated: potential is not positive")
        if np.any(v < self.alpha * (1 - 1e-12)):
            raise DomainError(f"assumption (V) violated: V < declared lower bound alpha={self.alpha}")


@dataclass
class ConstantPotential(PotentialField):
    c: float = 1.0

    def __post_init__(self):
        self.alpha = float(self.c)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return np.full(z.shape[:-1], float(self.c))

    def gradient(self, z):
        return np.zeros_like(np.asarray(z, dtype=float))

    def hessian(self, z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape + (z.shape[-1],))


@dataclass
class QuadraticWell(PotentialField):
    """V(z) = base + c |z - center|^2."""

    c: float = 1.0
    center: Sequence[float] = (0.0,)
    base: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.alpha = float(self.base) if self.c >= 0 else -np.inf

    def value(self, z):
        d = np.asarray(z, dtype=float) - self.center
        return self.base + self.c * np.sum(d * d, axis=-1)

    def gradient(self, z):
        return 2.0 * self.c * (np.asarray(z, dtype=float) - self.center)

    def hessian(self, z):
        z = np.asarray(z, dtype=float)
        N = z.shape[-1]
        return np.broadcast_to(2.0 * self.c * np.eye(N), z.shape + (N,)).copy()


@dataclass
class GaussianWells(PotentialField):
    """V(z) = vinf - sum_k depth_k exp(-|z - c_k|^2 / (2 width_k^2))."""

    vinf: float = 2.0
    depths: Sequence[float] = (1.0,)
    centers: Sequence[Sequence[float]] = ((0.0,),)
    widths: Sequence[float] = (1.0,)

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=float)
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.widths = np.asarray(self.widths, dtype=float)
        if not (len(self.depths) == len(self.centers) == len(self.widths)):
            raise DomainError("gaussian wells: depths, centers and widths must have equal length")
        self.alpha = float(self.vinf - np.sum(np.clip(self.depths, 0, None)))

    def _parts(self, z):
        z = np.asarray(z, dtype=float)
        d = z[..., None, :] - self.centers            # (..., K, N)
        s2 = self.widths ** 2
        e = self.depths * np.exp(-np.sum(d * d, axis=-1) / (2 * s2))   # (..., K)
        return d, s2, e

    def value(self, z):
        _, _, e = self._parts(z)
        return self.vinf - np.sum(e, axis=-1)

    def gradient(self, z):
        d, s2, e = self._parts(z)
        return np.sum((e / s2)[..., None] * d, axis=-2)

    def hessian(self, z):
        d, s2, e = self._parts(z)
        N = d.shape[-1]
        outer = d[..., :, None] * d[..., None, :]
        terms = (e / s2)[..., None, None] * (np.eye(N) - outer / s2[:, None, None])
        return np.sum(terms, axis=-3)


@dataclass
class ScaledPotential(PotentialField):
    """y -> V(eps * y): the potential seen in the stretched variable."""

    base: PotentialField = None
    eps: float = 1.0

    def __post_init__(self):
        self.alpha = self.base.alpha

    def value(self, z):
        return self.base.value(self.eps * np.asarray(z, dtype=float))

    def gradient(self, z):
        return self.eps * self.base.gradient(self.eps * np.asarray(z, dtype=float))

    def hessian(self, z):
        return self.eps ** 2 * self.base.hessian(self.eps * np.asarray(z, dtype=float))


# --------------------------------------------------------------------------
# diffusion matrix J
# --------------------------------------------------------------------------

class DiffusionField:
    """Symmetric matrix field J with declared ellipticity ``nu`` and bound ``upper``."""

    nu: float = 0.0
    upper: float = np.inf

    def value(self, z):
        raise NotImplementedError

    def derivative(self, z):
        raise NotImplementedError

    def second_derivative(self, z):
        """``[..., k, l, i, j] = d^2 J_ij / dz_k dz_l`` by centered differences."""
        z = np.asarray(z, dtype=float)
        N = z.shape[-1]
        h = _fd_step(z)
        out = np.empty(z.shape[:-1] + (N, N, N, N))
        for l in range(N):
            e = np.zeros(N)
            e[l] = 1.0
            dp = self.derivative(z + h * e)
            dm = self.derivative(z - h * e)
            out[..., :, l, :, :] = (dp - dm) / (2 * h[..., None, None])
        return out

    def validate(self, points) -> None:
        Jv = np.asarray(self.value(points))
        if not np.all(np.isfinite(Jv)):
            raise EllipticityError("assumption (J) violated: non-finite matrix entries")
        if not np.array_equal(Jv, np.swapaxes(Jv, -1, -2)):
            raise EllipticityError("assumption (J) violated: matrix is not symmetric")
        eig = np.linalg.eigvalsh(Jv)
        if np.any(eig[..., 0] < self.nu * (1 - 1e-12)) or np.any(eig[..., 0] <= 0):
            raise EllipticityError(
                f"assumption (J) violated: smallest eigenvalue {eig[..., 0].min():.6g} below nu={self.nu}")
        if np.any(eig[..., -1] > self.upper * (1 + 1e-12)):
            raise EllipticityError(
                f"assumption (J) violated: largest eigenvalue {eig[..., -1].max():.6g} above bound {self.upper}")


@dataclass
class ConstantDiffusion(DiffusionField):
    matrix: np.ndarray = None

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        eig = np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))
        self.nu = float(eig[0])
        self.upper = float(eig[-1])

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.matrix, z.shape[:-1] + self.matrix.shape).copy()

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        N = self.matrix.shape[0]
        return np.zeros(z.shape[:-1] + (N, N, N))

    def second_derivative(self, z):
        z = np.asarray(z, dtype=float)
        N = self.matrix.shape[0]
        return np.zeros(z.shape[:-1] + (N, N, N, N))


def identity_diffusion(N: int) -> ConstantDiffusion:
    return ConstantDiffusion(np.eye(N))


@dataclass
class DiagonalDiffusion(DiffusionField):
    """J = diag(d_i(z)) with d_i(z) = a_i + sum_j b_ij s_j + sum_j q_ij s_j^2, s = z - center.

    ``nu`` defaults to min(a) when the entries cannot decrease below a
    (b absent and q >= 0); otherwise it must be declared.
    """

    a: Sequence[float] = (1.0,)
    b: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    center: Optional[Sequence[float]] = None
    nu: Optional[float] = None
    upper: float = np.inf

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        N = self.a.size
        self.b = np.zeros((N, N)) if self.b is None else np.asarray(self.b, dtype=float).reshape(N, N)
        self.q = np.zeros((N, N)) if self.q is None else np.asarray(self.q, dtype=float).reshape(N, N)
        self.center = np.zeros(N) if self.center is None else np.asarray(self.center, dtype=float)
        if self.nu is None:
            if np.any(self.b != 0) or np.any(self.q < 0):
                raise DomainError("diagonal diffusion with linear or negative quadratic terms needs an explicit nu")
            self.nu = float(self.a.min())
        if np.all(self.b == 0) and np.all(self.q == 0):
            self.upper = float(self.a.max())

    def _diag(self, z):
        s = np.asarray(z, dtype=float) - self.center
        return self.a + s @ self.b.T + (s * s) @ self.q.T

    def value(self, z):
        d = self._diag(z)
        N = self.a.size
        out = np.zeros(d.shape[:-1] + (N, N))
        idx = np.arange(N)
        out[..., idx, idx] = d
        return out

    def derivative(self, z):
        s = np.asarray(z, dtype=float) - self.center
        N = self.a.size
        # dd_i/dz_k = b_ik + 2 q_ik s_k
        dd = self.b[None, :, :] + 2.0 * self.q[None, :, :] * s[..., None, :]   # (..., i, k)
        dd = dd.reshape(s.shape[:-1] + (N, N))
        out = np.zeros(s.shape[:-1] + (N, N, N))
        idx = np.arange(N)
        out[..., :, idx, idx] = np.swapaxes(dd, -1, -2)
        return out

    def second_derivative(self, z):
        s = np.asarray(z, dtype=float)
        N = self.a.size
        out = np.zeros(s.shape[:-1] + (N, N, N, N))
        for i in range(N):
            for k in range(N):
                out[..., k, k, i, i] = 2.0 * self.q[i, k]
        return out


@dataclass
class AffineDiffusion(DiffusionField):
    """J(z) = A0 + sum_k z_k A_k with symmetric A0, A_k; nu must be declared."""

    A0: np.ndarray = None
    slopes: np.ndarray = None
    nu: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        self.A0 = np.atleast_2d(np.asarray(self.A0, dtype=float))
        N = self.A0.shape[0]
        self.slopes = np.asarray(self.slopes, dtype=float).reshape(N, N, N)
        if not np.allclose(self.A0, self.A0.T) or not np.allclose(self.slopes, np.swapaxes(self.slopes, 1, 2)):
            raise EllipticityError("affine diffusion: A0 and slopes must be symmetric")

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return self.A0 + np.einsum("...k,kij->...ij", z, self.slopes)

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.slopes, z.shape[:-1] + self.slopes.shape).copy()

    def second_derivative(self, z):
        z = np.asarray(z, dtype=float)
        N = self.A0.shape[0]
        return np.zeros(z.shape[:-1] + (N, N, N, N))


@dataclass
class ScaledDiffusion(DiffusionField):
    """y -> J(eps * y)."""

    base: DiffusionField = None
    eps: float = 1.0

    def __post_init__(self):
        self.nu = self.base.nu
        self.upper = self.base.upper

    def value(self, z):
        return self.base.value(self.eps * np.asarray(z, dtype=float))

    def derivative(self, z):
        return self.eps * self.base.derivative(self.eps * np.asarray(z, dtype=float))

    def second_derivative(self, z):
        return self.eps ** 2 * self.base.second_derivative(self.eps * np.asarray(z, dtype=float))


# --------------------------------------------------------------------------
# Gamma
# --------------------------------------------------------------------------

@dataclass
class LandscapeSample:
    point: np.ndarray
    value: float
    gradient: np.ndarray
    classification: str
    hessian: np.ndarray = field(default=None, repr=False)


def gamma_exponent(N: int, p: float) -> float:
    return (p + 1.0) / (p - 1.0) - N / 2.0


def gamma_values(points, V: PotentialField, J: DiffusionField, N: int, p: float):
    """Vectorized Gamma(z) = V^a (det J)^(1/2) without gradient or checks beyond positivity."""
    v = np.asarray(V.value(points))
    dJ = np.linalg.det(np.asarray(J.value(points)))
    if np.any(v <= 0):
        raise DomainError("assumption (V) violated: non-positive potential")
    if np.any(dJ <= 0):
        raise EllipticityError("assumption (J) violated: det J <= 0")
    return v ** gamma_exponent(N, p) * np.sqrt(dJ)


def _gamma_value_grad(z, V, J, N, p):
    a = gamma_exponent(N, p)
    v = float(V.value(z))
    if not v > 0:
        raise DomainError(f"assumption (V) violated at z={z}: V={v}")
    Jz = np.asarray(J.value(z))
    try:
        L = np.linalg.cholesky(Jz)
    except np.linalg.LinAlgError:
        raise EllipticityError(f"assumption (J) violated at z={z}: J is not positive-definite") from None
    sqrt_det = float(np.prod(np.diag(L)))
    gam = v ** a * sqrt_det
    dJ = np.asarray(J.derivative(z))                      # (k, i, j)
    Jinv = np.linalg.inv(Jz)
    # Jacobi: d sqrt(det J) = 1/2 sqrt(det J) tr(J^-1 dJ)
    tr = np.einsum("ij,kji->k", Jinv, dJ)
    grad = gam * (a * np.asarray(V.gradient(z)) / v + 0.5 * tr)
    return gam, grad


def gamma_hessian(z, V, J, N, p):
    """Finite-difference Hessian of Gamma from the analytic gradient."""
    z = np.asarray(z, dtype=float)
    h = 1e-5 * (1.0 + np.linalg.norm(z))
    H = np.empty((N, N))
    for k in range(N):
        e = np.zeros(N)
        e[k] = h
        H[k] = (_gamma_value_grad(z + e, V, J, N, p)[1] - _gamma_value_grad(z - e, V, J, N, p)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def classify_hessian(H, scale=1.0, rtol=DEGENERACY_RTOL) -> str:
    norm = np.linalg.norm(H, 2)
    if norm <= 1e-12 * max(scale, 1e-300):
        return "degenerate"
    eig = np.linalg.eigvalsh(H)
    if np.any(np.abs(eig) < rtol * norm):
        return "degenerate"
    if np.all(eig > 0):
        return "min"
    if np.all(eig < 0):
        return "max"
    return "saddle"


def gamma_eval(z, V: PotentialField, J: DiffusionField, N: int, p: float) -> LandscapeSample:
    """Gamma and its gradient at z, classified by the sign pattern of its Hessian."""
    check_exponent(N, p)
    z = np.asarray(z, dtype=float).reshape(N)
    gam, grad = _gamma_value_grad(z, V, J, N, p)
    H = gamma_hessian(z, V, J, N, p)
    return LandscapeSample(z, gam, grad, classify_hessian(H, scale=gam), H)


def find_gamma_critical_points(box, coarse_grid: int, tol: float, V: PotentialField, J: DiffusionField,
                               N: int, p: float, max_newton: int = 50) -> list:
    """Locate critical points of Gamma inside an axis-aligned box.

    ``box`` is a sequence of (lo, hi) pairs. Candidates are coarse-grid nodes
    where |grad Gamma| is a discrete local minimum; each is polished by damped
    Newton on grad Gamma. Returned points satisfy |grad Gamma| <= tol and are
    pairwise farther apart than sqrt(tol).
    """
    check_exponent(N, p)
    box = np.asarray(box, dtype=float).reshape(N, 2)
    if np.any(box[:, 1] <= box[:, 0]):
        raise DomainError("empty search box")
    if tol <= 0:
        raise DomainError("tol must be positive")
    axes = [np.linspace(lo, hi, coarse_grid) for lo, hi in box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = mesh.shape[:-1]
    gnorm = np.empty(shape)
    for idx in np.ndindex(*shape):
        gnorm[idx] = np.linalg.norm(_gamma_value_grad(mesh[idx], V, J, N, p)[1])

    candidates = []
    for idx in np.ndindex(*shape):
        g = gnorm[idx]
        is_min = True
        for d in range(N):
            for step in (-1, 1):
                j = list(idx)
                j[d] += step
                if 0 <= j[d] < shape[d] and gnorm[tuple(j)] < g:
                    is_min = False
        if is_min:
            candidates.append(mesh[idx])

    span = box[:, 1] - box[:, 0]
    found = []
    for z0 in candidates:
        z = _newton_on_gradient(z0, V, J, N, p, tol, max_newton, box, span)
        if z is None:
            continue
        if np.any(z < box[:, 0] - 1e-9 * span) or np.any(z > box[:, 1] + 1e-9 * span):
            log.info("critical point %s lies outside the search box; dropped", z)
            continue
        if any(np.linalg.norm(z - s.point) < np.sqrt(tol) for s in found):
            continue
        found.append(gamma_eval(z, V, J, N, p))
    return found


def _newton_on_gradient(z0, V, J, N, p, tol, max_iter, box, span):
    z = np.array(z0, dtype=float)
    g = _gamma_value_grad(z, V, J, N, p)[1]
    for _ in range(max_iter):
        gn = np.linalg.norm(g)
        if gn <= tol:
            return z
        H = gamma_hessian(z, V, J, N, p)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while t > 1e-6:
            zt = z + t * step
            gt = _gamma_value_grad(zt, V, J, N, p)[1]
            if np.linalg.norm(gt) < gn:
                break
            t *= 0.5
        else:
            log.info("Gamma Newton stalled from %s; candidate dropped", z0)
            return None
        z, g = zt, gt
        if np.any(z < box[:, 0] - 0.5 * span) or np.any(z > box[:, 1] + 0.5 * span):
            log.info("Gamma Newton diverged from %s; candidate dropped", z0)
            return None
    if np.linalg.norm(g) <= tol:
        return z
    log.info("Gamma Newton hit the iteration cap from %s; candidate dropped", z0)
    return None


def check_lambda_well(box, V, J, N, p, samples: int = 41):
    """Return (min over box, min over its boundary) of Gamma on a sample lattice.

    Used before penalized runs to confirm min_Lambda Gamma < min_boundary Gamma.
    """
    box = np.asarray(box, dtype=float).reshape(N, 2)
    axes = [np.linspace(lo, hi, samples) for lo, hi in box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = gamma_values(mesh.reshape(-1, N), V, J, N, p).reshape(mesh.shape[:-1])
    boundary = np.zeros(vals.shape, dtype=bool)
    for d in range(N):
        sl = [slice(None)] * N
        sl[d] = 0
        boundary[tuple(sl)] = True
        sl[d] = -1
        boundary[tuple(sl)] = True
    return float(vals.min()), float(vals[boundary].min())


# --------------------------------------------------------------------------
# diagonalizing transform
# --------------------------------------------------------------------------

@dataclass
class Transform:
    """T with T^t J T = I, T = L^{-t} for the Cholesky factor J = L L^t.

    Profiles use ``T.T`` (= L^{-1}) as the coordinate map: |T^t x|^2 = x^t J^{-1} x.
    """

    matrix: np.ndarray
    source: Optional[np.ndarray]
    det: float
    cholesky: np.ndarray = field(repr=False, default=None)

    @property
    def profile_map(self) -> np.ndarray:
        return self.matrix.T


def diagonalizing_transform(J_at_z, z=None, nu: float = 0.0) -> Transform:
    J_at_z = np.atleast_2d(np.asarray(J_at_z, dtype=float))
    if not np.allclose(J_at_z, J_at_z.T, rtol=0, atol=1e-14 * max(1.0, np.abs(J_at_z).max())):
        raise EllipticityError("diagonalizing transform needs a symmetric matrix")
    try:
        L = np.linalg.cholesky(J_at_z)
    except np.linalg.LinAlgError:
        raise EllipticityError("Cholesky breakdown: J is not positive-definite (ellipticity violated)") from None
    if nu > 0 and np.linalg.eigvalsh(J_at_z)[0] < nu * (1 - 1e-12):
        raise EllipticityError(f"ellipticity violated: smallest eigenvalue below nu={nu}")
    N = L.shape[0]
    Linv = np.linalg.solve(L, np.eye(N))
    Linv = np.tril(Linv)
    T = Linv.T
    det = float(1.0 / np.prod(np.diag(L)))
    return Transform(T, None if z is None else np.asarray(z, dtype=float), det, L)


def inverse_cholesky_derivative(L: np.ndarray, dJ: np.ndarray) -> np.ndarray:
    """Directional derivative of L^{-1} when J = L L^t moves along dJ."""
    Linv = np.linalg.inv(L)
    X = Linv @ dJ @ Linv.T
    Phi = np.tril(X)
    Phi[np.diag_indices_from(Phi)] *= 0.5
    dL = L @ Phi
    return -Linv @ dL @ Linv
