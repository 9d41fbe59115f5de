"""Penalized nonlinearity g(x, u): the power f(u) = (u+)^p inside the region
Lambda, cut to the linear branch (alpha/k) u above the threshold ell outside.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DomainError

log = logging.getLogger(__name__)


def default_theta(p: float) -> float:
    return 0.5 * (p + 3.0)


def default_k(theta: float) -> float:
    return 2.0 * theta / (theta - 2.0)


def penalty_threshold(p: float, alpha: float, k: float, f: Optional[Callable[[float], float]] = None,
                      u_cap: float = 1e12) -> float:
    """Threshold ell with f(ell)/ell = alpha/k.

    Closed form (alpha/k)^{1/(p-1)} for the power nonlinearity; for a supplied
    increasing-ratio ``f`` the ratio equation is bisected after doubling an
    upper bracket.
    """
    if not alpha > 0:
        raise DomainError(f"alpha={alpha} must be positive")
    if not p > 1:
        raise DomainError(f"p={p} must exceed 1")
    if not k > 0:
        raise DomainError(f"k={k} must be positive")
    target = alpha / k
    if f is None:
        return target ** (1.0 / (p - 1.0))

    def phi(u):
        return f(u) / u - target

    lo = 1e-300
    hi = 1.0
    while phi(hi) < 0:
        lo = hi
        hi *= 2.0
        if hi > u_cap:
            raise DomainError("f(u)/u never reaches alpha/k: nonlinearity shape assumption violated")
    while phi(lo) > 0:
        hi = lo
        lo *= 0.5
        if lo < 1e-300:
            raise DomainError("f(u)/u exceeds alpha/k near 0: nonlinearity shape assumption violated")
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if phi(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalization data; ``box`` has shape (N, 2) with rows [lo, hi]."""

    box: np.ndarray
    p: float
    alpha: float
    theta: float
    k: float
    ell: float

    @property
    def slope(self) -> float:
        return self.alpha / self.k

    @property
    def N(self) -> int:
        return self.box.shape[0]

    def inside(self, x) -> np.ndarray:
        """Sharp indicator of Lambda (closed box) at points of shape (..., N)."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.box[:, 0]) & (x <= self.box[:, 1]), axis=-1)

    def distance_to_boundary(self, z) -> float:
        z = np.asarray(z, dtype=float)
        if not np.all(self.inside(z)):
            return 0.0
        return float(np.min(np.minimum(z - self.box[:, 0], self.box[:, 1] - z)))

    def validate_in(self, L: float) -> None:
        if np.any(self.box[:, 0] <= -L) or np.any(self.box[:, 1] >= L):
            raise ConfigError(f"Lambda {self.box.tolist()} is not strictly inside the box [-{L},{L}]^N")


def make_penalty(box, p: float, alpha: float, theta: Optional[float] = None, k: Optional[float] = None) -> PenaltyConfig:
    """Validated PenaltyConfig with the default theta=(p+3)/2 and k=2 theta/(theta-2)."""
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box.reshape(-1, 2)
    if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
        raise ConfigError(f"Lambda must be a non-empty box [lo1,hi1,...], got {box.tolist()}")
    theta = default_theta(p) if theta is None else float(theta)
    if not 2.0 < theta < p + 1.0:
        raise ConfigError(f"theta={theta} must lie in (2, p+1)")
    k = default_k(theta) if k is None else float(k)
    if not k > theta / (theta - 2.0):
        raise ConfigError(f"k={k} must exceed theta/(theta-2)={theta / (theta - 2.0)}")
    ell = penalty_threshold(p, alpha, k)
    return PenaltyConfig(box, float(p), float(alpha), theta, k, ell)


def penalized_nonlinearity(x, u, cfg: PenaltyConfig):
    """Return (g, G, dg) at points ``x`` (..., N) and values ``u`` (...).

    dg at the kink u = ell outside Lambda is the derivative from below.
    """
    u = np.asarray(u, dtype=float)
    p, ell, s = cfg.p, cfg.ell, cfg.slope
    pos = np.maximum(u, 0.0)
    g = pos ** p
    G = pos ** (p + 1) / (p + 1)
    dg = np.where(u > 0, p * pos ** (p - 1), 0.0)
    cut = (~cfg.inside(x)) & (pos > ell)
    g = np.where(cut, s * pos, g)
    G = np.where(cut, ell ** (p + 1) / (p + 1) + 0.5 * s * (pos**2 - ell**2), G)
    dg = np.where(cut, s, dg)
    return g, G, dg
