import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from concentra.discretization import build_grid
from concentra.errors import DomainError, SolverError
from concentra.fields import (
    ConstantDiffusion,
    ConstantPotential,
    DiagonalDiffusion,
    QuadraticWell,
    identity_diffusion,
)
from concentra.limit_profile import (
    RadialProfile,
    cached_profile,
    frozen_sigma_numeric,
    scaled_profile,
    sigma_closed_form,
    sigma_directional_derivative,
    solve_radial_ground_state,
)


def shooting_oracle(N, p, r_end=9.0):
    """Independent solve: adaptive DOP853 shooting with event classification."""
    r0 = 1e-4

    def traj(a, stop):
        y0 = [a + (a - a**p) * r0**2 / (2 * N), (a - a**p) * r0 / N]

        def over(r, y):
            return y[0]

        def under(r, y):
            return y[1]

        over.terminal = under.terminal = True
        over.direction, under.direction = -1, 1
        return integrate.solve_ivp(lambda r, y: [y[1], y[0] - max(y[0], 0.0) ** p - (N - 1) / r * y[1]],
                                   (r0, stop), y0, method="DOP853", rtol=1e-13, atol=1e-15,
                                   events=[over, under], dense_output=True)

    lo, hi = 1.01, 10.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if len(traj(mid, 14.0).t_events[0]):
            hi = mid
        else:
            lo = mid
    a = 0.5 * (lo + hi)
    s = traj(a, r_end)
    area = 2 * math.pi ** (N / 2) / math.gamma(N / 2)
    C0 = area * integrate.quad(lambda r: s.sol(r)[0] ** (p + 1) * r ** (N - 1), r0, s.t[-1],
                               limit=200, epsabs=1e-14)[0]
    return a, C0


# ----------------------------------------------------------------------------
# radial ground state
# ----------------------------------------------------------------------------

def test_one_dimensional_sech():
    prof = solve_radial_ground_state(1, 3.0)
    assert prof.U0 == pytest.approx(math.sqrt(2.0), rel=1e-5)
    assert prof.C0 == pytest.approx(16.0 / 3.0, rel=1e-5)
    x = np.linspace(0, 8, 81)
    assert np.allclose(prof.value(x), math.sqrt(2.0) / np.cosh(x), atol=2e-5)


@pytest.mark.parametrize("p", [2.0, 2.5, 4.0, 5.0])
def test_one_dimensional_general_p(p):
    prof = solve_radial_ground_state(1, p)
    assert prof.U0 == pytest.approx(((p + 1) / 2) ** (1 / (p - 1)), rel=1e-5)


def test_three_dimensional_against_independent_solver():
    prof = solve_radial_ground_state(3, 3.0)
    U0, C0 = shooting_oracle(3, 3.0)
    assert prof.U0 == pytest.approx(U0, rel=1e-5)
    assert prof.C0 == pytest.approx(C0, rel=1e-5)


@pytest.mark.parametrize("N,p", [(1, 3.0), (2, 3.0), (3, 3.0), (3, 2.0)])
def test_profile_invariants(N, p):
    prof = cached_profile(N, p)
    prof.check_invariants()
    assert prof.U0 > 1.0
    assert prof.dU[0] == 0.0
    assert np.all(np.diff(prof.U) < 0)
    assert prof.U[-1] < 1e-8 * prof.U0
    assert prof.C1 == pytest.approx(prof.C0 * (0.5 - 1 / (p + 1)))


def test_residual_is_second_order():
    r1 = solve_radial_ground_state(2, 3.0, h_r=0.04).max_residual()
    r2 = solve_radial_ground_state(2, 3.0, h_r=0.02).max_residual()
    assert 3.0 <= r1 / r2 <= 5.0


def test_moment_invariant_under_splice_radius():
    base = solve_radial_ground_state(3, 3.0)
    for rtol in (1e-6, 1e-10):
        other = solve_radial_ground_state(3, 3.0, splice_rtol=rtol)
        assert other.C0 == pytest.approx(base.C0, rel=1e-6)


def test_invalid_exponent_rejected():
    with pytest.raises(DomainError):
        solve_radial_ground_state(3, 6.0)
    with pytest.raises(SolverError):
        solve_radial_ground_state(2, 3.0, bracket=(1.5, 2.0))


def test_save_load_round_trip(tmp_path):
    prof = cached_profile(2, 3.0)
    path = tmp_path / "profile.txt"
    prof.save(path, extra_header=["run a"])
    text = path.read_text().splitlines()
    assert text[0] == "# run a"
    assert text[1] == "# N p U0 C0 rmax hr"
    back = RadialProfile.load(path)
    assert back.N == 2 and back.p == 3.0
    assert np.array_equal(back.r, prof.r)
    assert np.array_equal(back.U, prof.U)
    assert back.C0 == prof.C0
    rho = np.linspace(0, 25, 101)
    assert np.array_equal(back.value(rho), prof.value(rho))


# ----------------------------------------------------------------------------
# scaled profiles and the closed-form ground energy
# ----------------------------------------------------------------------------

def test_scaled_profile_unit_coefficients():
    prof = cached_profile(2, 3.0)
    sp = scaled_profile([0.3, -0.2], 0.5, prof, ConstantPotential(1.0), identity_diffusion(2))
    assert sp.alpha == 1.0 and sp.beta == 1.0
    assert np.array_equal(sp.transform.matrix, np.eye(2))
    x = np.array([[0.3, -0.2], [1.3, -0.2], [0.3, 1.8]])
    assert np.allclose(sp(x), prof.value(np.array([0.0, 1.0, 2.0])))
    assert sp.peak == pytest.approx(prof.U0)


def test_scaled_profile_amplitude_and_rate():
    prof = cached_profile(2, 3.0)
    sp = scaled_profile([0.0, 0.0], 1.0, prof, ConstantPotential(4.0), identity_diffusion(2))
    assert sp.alpha == pytest.approx(2.0) and sp.beta == pytest.approx(2.0)
    assert sp(np.array([[0.5, 0.0]]))[0] == pytest.approx(2.0 * prof.value(1.0))


def test_scaled_profile_ellipsoids():
    prof = cached_profile(2, 3.0)
    sp = scaled_profile([0.0, 0.0], 1.0, prof, ConstantPotential(1.0), ConstantDiffusion(np.diag([4.0, 1.0])))
    assert sp(np.array([[2.0, 0.0]]))[0] == pytest.approx(sp(np.array([[0.0, 1.0]]))[0], rel=1e-14)
    x = np.random.default_rng(0).normal(size=(50, 2))
    assert np.all(sp(x) <= sp.peak)
    far = np.array([[2.0 * (prof.r_max + 1.0), 0.0]])
    assert sp(far)[0] < 1e-8 * sp.peak


def test_scaled_profile_dimension_mismatch():
    with pytest.raises(DomainError):
        scaled_profile([0.0], 1.0, cached_profile(2, 3.0), ConstantPotential(1.0), identity_diffusion(1))


def test_sigma_closed_form_examples():
    p1 = cached_profile(1, 3.0)
    assert p1.C1 == pytest.approx(p1.C0 / 4)
    assert sigma_closed_form([0.0], p1, ConstantPotential(1.0), identity_diffusion(1)) == pytest.approx(4 / 3, rel=1e-5)
    p3 = cached_profile(3, 3.0)
    s = sigma_closed_form(np.zeros(3), p3, ConstantPotential(4.0), identity_diffusion(3))
    assert s == pytest.approx(2 * p3.C1, rel=1e-12)


# ----------------------------------------------------------------------------
# frozen ground energy
# ----------------------------------------------------------------------------

def test_frozen_one_dimensional():
    st_ = frozen_sigma_numeric([0.0], build_grid(1, 20.0, 2048), ConstantPotential(1.0), identity_diffusion(1), 3.0)
    assert st_.sigma == pytest.approx(4 / 3, rel=0.01)
    assert st_.nehari_residual <= 1e-8 * np.sum(st_.u**2)
    assert st_.sigma > 0


@settings(max_examples=4)
@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_frozen_matches_closed_form(z1, z2):
    V = QuadraticWell(1.0, [0.1, 0.0])
    J = DiagonalDiffusion([1.0, 1.5], q=[[0.3, 0.0], [0.0, 0.2]])
    z = np.array([z1, z2])
    st_ = frozen_sigma_numeric(z, build_grid(2, 10.0, 129), V, J, 3.0)
    ref = sigma_closed_form(z, cached_profile(2, 3.0), V, J)
    assert st_.sigma / ref == pytest.approx(1.0, abs=0.02)
    assert st_.sigma >= ref * 0.95


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_frozen_scaling_with_diffusion(c):
    grid = build_grid(2, 12.0, 129)
    V = ConstantPotential(1.0)
    base = frozen_sigma_numeric([0.0, 0.0], grid, V, identity_diffusion(2), 3.0).sigma
    # stretch the box with sqrt(c) so the discrete problems are exact rescalings
    grid_c = build_grid(2, 12.0 * math.sqrt(c), 129)
    scaled = frozen_sigma_numeric([0.0, 0.0], grid_c, V, ConstantDiffusion(c * np.eye(2)), 3.0).sigma
    assert scaled / base == pytest.approx(c ** (2 / 2), rel=1e-8)


def test_directional_derivative_constant_fields():
    grid = build_grid(2, 10.0, 65)
    V, J = ConstantPotential(2.0), ConstantDiffusion(np.diag([1.0, 3.0]))
    st_ = frozen_sigma_numeric([0.0, 0.0], grid, V, J, 3.0)
    assert sigma_directional_derivative([0.0, 0.0], 0, st_, V, J) == 0.0
    assert sigma_directional_derivative([0.0, 0.0], 1, st_, V, J) == 0.0


def test_directional_derivative_symmetric_point():
    grid = build_grid(2, 10.0, 65)
    V, J = QuadraticWell(1.0, [0.0, 0.0]), identity_diffusion(2)
    st_ = frozen_sigma_numeric([0.0, 0.0], grid, V, J, 3.0)
    assert abs(sigma_directional_derivative([0.0, 0.0], 0, st_, V, J)) < 1e-14


def test_directional_derivative_matches_differences():
    grid = build_grid(2, 10.0, 97)
    V, J = QuadraticWell(1.0, [0.0, 0.0]), identity_diffusion(2)
    z = np.array([0.5, 0.0])
    st_ = frozen_sigma_numeric(z, grid, V, J, 3.0, tol=1e-10)
    d = sigma_directional_derivative(z, 0, st_, V, J)
    h = 1e-3
    sp = frozen_sigma_numeric(z + [h, 0], grid, V, J, 3.0, tol=1e-10).sigma
    sm = frozen_sigma_numeric(z - [h, 0], grid, V, J, 3.0, tol=1e-10).sigma
    assert d == pytest.approx((sp - sm) / (2 * h), rel=0.02)
