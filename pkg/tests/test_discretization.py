import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concentra.discretization import (
    DiscreteEnergy,
    GridFunction,
    ProblemSpec,
    build_grid,
    functional_eval,
    hv_norm,
    stiffness_matrix,
)
from concentra.errors import ConfigError, DomainError, GridSizeError
from concentra.fields import (
    ConstantDiffusion,
    ConstantPotential,
    DiagonalDiffusion,
    QuadraticWell,
    identity_diffusion,
)
from concentra.penalty import make_penalty


def _bump(grid, c=None, s=0.6, amp=1.5):
    x = grid.points()
    c = np.zeros(grid.N) if c is None else np.asarray(c)
    return amp * np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * s * s))


def _energies(grid):
    V = QuadraticWell(0.8, [0.2] * grid.N, base=1.2)
    J = DiagonalDiffusion(np.linspace(1.0, 1.5, grid.N), q=0.2 * np.eye(grid.N))
    cfg = make_penalty([[-0.5, 0.6]] * grid.N, 3.0, V.alpha)
    spec = ProblemSpec(grid, V, J, 3.0, cfg)
    return {
        "raw": DiscreteEnergy(spec, 0.3, "raw"),
        "frozen": DiscreteEnergy(spec, 1.0, "frozen", z=[0.1] * grid.N),
        "penalized": DiscreteEnergy(spec, 0.3, "penalized"),
    }


# ----------------------------------------------------------------------------
# grid
# ----------------------------------------------------------------------------

def test_grid_examples():
    g = build_grid(1, 10.0, 11)
    assert g.h == 2.0
    g3 = build_grid(3, 10.0, 65)
    assert g3.size == 63**3
    assert g3.cell_count == 64**3
    with pytest.raises(GridSizeError):
        build_grid(1, 1.0, 4)
    with pytest.raises(GridSizeError):
        build_grid(3, 10.0, 65, memory_cap=1e6)
    with pytest.raises(DomainError):
        build_grid(4, 1.0, 9)


def test_grid_points_lexicographic():
    g = build_grid(2, 1.0, 9, center=[0.5, -0.5])
    x = g.points()
    assert x.shape == (49, 2)
    assert np.allclose(x[0], [0.5 - 0.75, -0.5 - 0.75])
    assert np.allclose(x[1], [0.5 - 0.75, -0.5 - 0.5])
    assert g.contains([0.5, -0.5]) and not g.contains([2.0, 0.0])
    full = g.to_full(np.ones(g.size))
    assert full.shape == (9, 9) and full[0].sum() == 0 and full[1:-1, 1:-1].sum() == 49


# ----------------------------------------------------------------------------
# energy, gradient, Hessian
# ----------------------------------------------------------------------------

def test_zero_field():
    for e in _energies(build_grid(2, 2.0, 17)).values():
        val, grad = e.value_and_gradient(np.zeros(e.grid.size))
        assert val == 0.0 and not np.any(grad)


def test_penalized_mode_needs_config():
    grid = build_grid(1, 2.0, 17)
    spec = ProblemSpec(grid, ConstantPotential(1.0), identity_diffusion(1), 3.0)
    with pytest.raises(ConfigError):
        DiscreteEnergy(spec, 1.0, "penalized")
    with pytest.raises(ConfigError):
        DiscreteEnergy(spec, 1.0, "frozen")
    with pytest.raises(ConfigError):
        DiscreteEnergy(spec, 1.0, "other")


def test_non_finite_rejected():
    e = _energies(build_grid(1, 2.0, 17))["raw"]
    u = np.zeros(e.grid.size)
    u[3] = np.nan
    with pytest.raises(FloatingPointError):
        e.value(u)
    with pytest.raises(DomainError):
        e.value(np.zeros(3))


def test_sech_gradient_second_order():
    V, J = ConstantPotential(1.0), identity_diffusion(1)
    gmax = []
    for n in (201, 401, 801):
        grid = build_grid(1, 20.0, n)
        u = math.sqrt(2.0) / np.cosh(grid.points()[:, 0])
        gmax.append(functional_eval(u, 1.0, ProblemSpec(grid, V, J, 3.0)).grad_max)
    orders = np.log2(np.array(gmax[:-1]) / np.array(gmax[1:]))
    assert np.all(orders > 1.9)


@pytest.mark.parametrize("N", [1, 2, 3])
@pytest.mark.parametrize("mode", ["raw", "frozen", "penalized"])
def test_gradient_is_exact_derivative(N, mode):
    grid = build_grid(N, 1.5, {1: 41, 2: 17, 3: 9}[N])
    e = _energies(grid)[mode]
    ell = e.cfg.ell if mode == "penalized" else None
    gen = np.random.default_rng(N)
    for _ in range(10):
        u = gen.uniform(-0.2, 2.0, grid.size)
        v = np.clip(gen.normal(size=grid.size), -3, 3)
        if ell is not None:
            # g has a kink at ell outside Lambda; keep samples off it
            near = np.abs(u - ell) < 0.05
            u[near] = ell + np.where(u[near] < ell, -0.05, 0.05)
        _, g = e.value_and_gradient(u)
        exact = float(g @ v)
        errs = []
        for t in (1e-2, 5e-3, 2.5e-3):
            fd = (e.value(u + t * v) - e.value(u - t * v)) / (2 * t)
            errs.append(abs(fd - exact))
        floor = 1e-11 * (abs(exact) + 1)
        if errs[1] > floor:
            assert math.log2(errs[0] / errs[1]) >= 1.9
        else:
            assert errs[-1] < 1e3 * floor


@pytest.mark.parametrize("mode", ["raw", "frozen", "penalized"])
def test_hessian_symmetric_and_consistent(mode):
    grid = build_grid(2, 1.5, 17)
    e = _energies(grid)[mode]
    gen = np.random.default_rng(3)
    for _ in range(5):
        u, v, w = gen.uniform(0.05, 2.0, grid.size), gen.normal(size=grid.size), gen.normal(size=grid.size)
        H = e.hessian(u)
        a, b = float(w @ (H @ v)), float(v @ (H @ w))
        assert abs(a - b) <= 1e-10 * max(abs(a), 1e-300)
        t = 1e-6
        fd = (e.value_and_gradient(u + t * v)[1] - e.value_and_gradient(u - t * v)[1]) / (2 * t)
        if mode != "penalized":
            assert np.allclose(fd, H @ v, rtol=1e-5, atol=1e-7 * np.max(np.abs(H @ v)))


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_ellipticity_at_zero(seed):
    grid = build_grid(2, 1.5, 17)
    V = QuadraticWell(0.8, [0.2, 0.2], base=1.2)
    J = DiagonalDiffusion([1.0, 1.5], q=0.2 * np.eye(2))
    eps = 0.3
    e = DiscreteEnergy(ProblemSpec(grid, V, J, 3.0), eps, "raw")
    v = np.random.default_rng(seed).normal(size=grid.size)
    H = e.hessian(np.zeros(grid.size))
    K1 = stiffness_matrix(grid, np.eye(2))
    mesh = float(v @ (K1 @ v)) + grid.cell_volume * float(v @ v)
    assert float(v @ (H @ v)) >= min(eps**2 * J.nu, V.alpha) * mesh * (1 - 1e-12)


def test_translation_covariance():
    grid = build_grid(2, 3.0, 49)
    spec = ProblemSpec(grid, ConstantPotential(1.3), ConstantDiffusion([[1.2, 0.3], [0.3, 0.9]]), 3.0)
    e = DiscreteEnergy(spec, 0.7, "raw")
    u = grid.as_array(_bump(grid, s=0.3))
    shifted = np.roll(u, 1, axis=0)
    assert abs(u[-1]).max() < 1e-12
    a, b = e.value(u.ravel()), e.value(shifted.ravel())
    assert abs(a - b) <= 1e-12 * abs(a)


def test_identity_stiffness_is_five_point_laplacian():
    grid = build_grid(2, 1.0, 9)
    K = stiffness_matrix(grid, np.eye(2)).toarray()
    m = grid.m
    T = 2 * np.eye(m) - np.eye(m, k=1) - np.eye(m, k=-1)
    lap = np.kron(T, np.eye(m)) + np.kron(np.eye(m), T)
    assert np.allclose(K, lap, atol=1e-14)


# ----------------------------------------------------------------------------
# H_V norm and serialization
# ----------------------------------------------------------------------------

def test_hv_norm_examples():
    grid = build_grid(2, 2.0, 21)
    u = _bump(grid)
    assert hv_norm(np.zeros(grid.size), ConstantPotential(1.0), grid) == 0.0
    K = stiffness_matrix(grid, np.eye(2))
    h1 = math.sqrt(float(u @ (K @ u)) + grid.cell_volume * float(u @ u))
    assert hv_norm(u, ConstantPotential(1.0), grid) == pytest.approx(h1, rel=1e-14)
    V = QuadraticWell(1.0, [0.0, 0.0])
    V2 = QuadraticWell(2.0, [0.0, 0.0], base=2.0)
    diff = hv_norm(u, V2, grid) ** 2 - hv_norm(u, V, grid) ** 2
    mass = grid.cell_volume * float(np.sum(V.value(grid.points()) * u * u))
    assert diff == pytest.approx(mass, rel=1e-12)
    assert hv_norm(GridFunction(u, grid), V) > 0


def test_binary_round_trip(tmp_path):
    grid = build_grid(2, 1.5, 13, center=[0.25, -1.0])
    gf = GridFunction(_bump(grid), grid)
    path = tmp_path / "u.bin"
    gf.save_binary(path, header=["resolved config"])
    meta = (tmp_path / "u.bin.meta").read_text().splitlines()
    assert meta[0] == "# resolved config"
    assert meta[1] == "2 13 1.5 ordering=lex"
    back = GridFunction.load_binary(path)
    assert back.grid == grid
    assert np.array_equal(back.values, gf.values)


def test_csv_export(tmp_path):
    grid = build_grid(2, 1.0, 9)
    gf = GridFunction(_bump(grid), grid)
    path = tmp_path / "u.csv"
    gf.save_csv(path, header=["h1", "h2"])
    lines = path.read_text().splitlines()
    assert lines[:3] == ["# h1", "# h2", "x,y,u"]
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=3)
    assert np.allclose(data[:, :2], grid.points())
    assert np.array_equal(data[:, 2], gf.values)
    with pytest.raises(DomainError):
        GridFunction(np.zeros(27 * 27 * 27), build_grid(3, 1.0, 29)).save_csv(tmp_path / "x.csv")
    with pytest.raises(DomainError):
        GridFunction(np.zeros(5), grid)
