import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from concentra.errors import DomainError, EllipticityError
from concentra.fields import (
    AffineDiffusion,
    ConstantDiffusion,
    ConstantPotential,
    DiagonalDiffusion,
    GaussianWells,
    QuadraticWell,
    check_exponent,
    classify_hessian,
    diagonalizing_transform,
    find_gamma_critical_points,
    gamma_eval,
    gamma_values,
    identity_diffusion,
)

coords = st.floats(-1.5, 1.5, allow_nan=False)


def spd(draw_vals, N):
    M = np.asarray(draw_vals, dtype=float).reshape(N, N)
    return M @ M.T + 0.5 * np.eye(N)


# ----------------------------------------------------------------------------
# gamma_eval
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("N,p", [(1, 3.0), (2, 2.0), (3, 3.0), (3, 4.5)])
def test_gamma_trivial_fields(N, p):
    s = gamma_eval(np.full(N, 0.3), ConstantPotential(1.0), identity_diffusion(N), N, p)
    assert s.value == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(s.gradient, 0.0)


def test_gamma_power_of_potential():
    s = gamma_eval(np.zeros(3), ConstantPotential(4.0), identity_diffusion(3), 3, 3.0)
    assert s.value == pytest.approx(2.0, rel=1e-14)


def test_gamma_determinant():
    s = gamma_eval(np.zeros(3), ConstantPotential(1.0), ConstantDiffusion(np.diag([4.0, 1.0, 1.0])), 3, 3.0)
    assert s.value == pytest.approx(2.0, rel=1e-14)


def test_gamma_errors():
    with pytest.raises(DomainError):
        gamma_eval(np.zeros(2), ConstantPotential(-1.0), identity_diffusion(2), 2, 3.0)
    with pytest.raises(EllipticityError):
        gamma_eval(np.zeros(2), ConstantPotential(1.0), ConstantDiffusion(np.diag([1.0, -1.0])), 2, 3.0)
    with pytest.raises(DomainError):
        check_exponent(3, 5.0)
    with pytest.raises(DomainError):
        check_exponent(2, 1.0)
    check_exponent(2, 50.0)


def _fields():
    V = GaussianWells(3.0, (1.0, 0.5), ((-0.5, 0.2), (0.6, -0.3)), (0.7, 0.4))
    J = DiagonalDiffusion([1.0, 2.0], q=[[0.3, 0.1], [0.0, 0.4]])
    return V, J


@given(arrays(float, 2, elements=coords))
def test_gamma_gradient_matches_centered_differences(z):
    V, J = _fields()
    s = gamma_eval(z, V, J, 2, 3.0)
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        fd = np.array([(gamma_values(z + h * e, V, J, 2, 3.0) - gamma_values(z - h * e, V, J, 2, 3.0)) / (2 * h)
                       for e in np.eye(2)])
        errs.append(np.linalg.norm(fd - s.gradient))
    assert errs[-1] <= 1e-4 * (1 + s.value)
    # second order: halving the step quarters the error, unless already at roundoff
    if errs[0] > 1e-9:
        assert errs[1] < 0.35 * errs[0]


@given(arrays(float, 2, elements=coords), st.floats(0.1, 10.0))
def test_gamma_scaling_covariance(z, c):
    V, J = _fields()
    Jc = DiagonalDiffusion(c * np.array([1.0, 2.0]), q=c * np.array([[0.3, 0.1], [0.0, 0.4]]))
    g1 = gamma_values(z, V, J, 2, 3.0)
    g2 = gamma_values(z, V, Jc, 2, 3.0)
    assert g2 == pytest.approx(c ** (2 / 2) * g1, rel=1e-12)


def test_classification_matches_hessian_eigenvalues():
    assert classify_hessian(np.diag([1.0, 2.0])) == "min"
    assert classify_hessian(np.diag([-1.0, -2.0])) == "max"
    assert classify_hessian(np.diag([1.0, -2.0])) == "saddle"
    assert classify_hessian(np.diag([1.0, 1e-9])) == "degenerate"
    assert classify_hessian(np.zeros((2, 2))) == "degenerate"


# ----------------------------------------------------------------------------
# critical points
# ----------------------------------------------------------------------------

def test_single_minimum_of_radial_well():
    V = QuadraticWell(1.0, [0.0, 0.0])
    crit = find_gamma_critical_points([[-1, 1.3], [-1.2, 1]], 11, 1e-10, V, identity_diffusion(2), 2, 3.0)
    assert len(crit) == 1
    assert crit[0].classification == "min"
    assert np.linalg.norm(crit[0].point) < 1e-9


def test_double_well_against_dense_grid():
    V = GaussianWells(3.0, (1.0, 1.0), ((-1.0, 0.0), (1.0, 0.0)), (0.5, 0.5))
    J = identity_diffusion(2)
    box = np.array([[-2.0, 2.0], [-1.0, 1.0]])
    crit = find_gamma_critical_points(box, 41, 1e-10, V, J, 2, 3.0)
    kinds = sorted(c.classification for c in crit)
    assert kinds == ["min", "min", "saddle"]
    for c in crit:
        assert np.linalg.norm(c.gradient) <= 1e-10
    # oracle: dense evaluation of Gamma; minima sit at the dense-grid minima of each half
    x = np.linspace(-2, 2, 801)
    y = np.linspace(-1, 1, 401)
    X, Y = np.meshgrid(x, y, indexing="ij")
    G = gamma_values(np.stack([X, Y], -1).reshape(-1, 2), V, J, 2, 3.0).reshape(X.shape)
    for half in (x < 0, x > 0):
        sub = np.where(half[:, None], G, np.inf)
        i, j = np.unravel_index(np.argmin(sub), G.shape)
        zmin = np.array([x[i], y[j]])
        assert min(np.linalg.norm(c.point - zmin) for c in crit if c.classification == "min") < 0.01
    saddle = [c.point for c in crit if c.classification == "saddle"][0]
    assert np.allclose(saddle, 0.0, atol=1e-8)


def test_constant_landscape_is_degenerate():
    crit = find_gamma_critical_points([[-1, 1], [-1, 1]], 5, 1e-10, ConstantPotential(1.0), identity_diffusion(2), 2, 3.0)
    assert crit
    assert {c.classification for c in crit} == {"degenerate"}


def test_empty_box_rejected():
    with pytest.raises(DomainError):
        find_gamma_critical_points([[1, 0]], 5, 1e-10, ConstantPotential(1.0), identity_diffusion(1), 1, 3.0)


# ----------------------------------------------------------------------------
# diagonalizing transform
# ----------------------------------------------------------------------------

def test_transform_examples():
    T = diagonalizing_transform(np.eye(2))
    assert np.array_equal(T.matrix, np.eye(2))
    T = diagonalizing_transform(np.diag([4.0, 1.0]))
    assert np.allclose(T.matrix, np.diag([0.5, 1.0]), atol=1e-15)
    assert T.det == pytest.approx(0.5, rel=1e-12)
    J = np.array([[2.0, 1.0], [1.0, 2.0]])
    T = diagonalizing_transform(J)
    assert np.max(np.abs(T.matrix.T @ J @ T.matrix - np.eye(2))) <= 1e-12
    assert np.linalg.det(T.matrix) == pytest.approx(3 ** -0.5, rel=1e-12)
    assert T.det == pytest.approx(3 ** -0.5, rel=1e-12)


def test_transform_errors():
    with pytest.raises(EllipticityError):
        diagonalizing_transform(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(EllipticityError):
        diagonalizing_transform(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(EllipticityError):
        diagonalizing_transform(np.diag([1.0, 0.1]), nu=0.5)


@given(arrays(float, 9, elements=st.floats(-2, 2, allow_nan=False)))
def test_transform_invariants(vals):
    J = spd(vals, 3)
    T = diagonalizing_transform(J)
    assert np.max(np.abs(T.matrix.T @ J @ T.matrix - np.eye(3))) <= 1e-12 * np.linalg.cond(J)
    assert T.det == pytest.approx(np.linalg.det(J) ** -0.5, rel=1e-12)
    assert np.allclose(T.matrix, np.triu(T.matrix))


@given(arrays(float, 4, elements=st.floats(-2, 2, allow_nan=False)), st.floats(0.05, 20.0))
def test_transform_scaling(vals, c):
    J = spd(vals, 2)
    T1 = diagonalizing_transform(J).matrix
    T2 = diagonalizing_transform(c * J).matrix
    assert np.allclose(T2, T1 / np.sqrt(c), rtol=1e-12, atol=1e-14)


@given(arrays(float, 4, elements=st.floats(-2, 2, allow_nan=False)),
       arrays(float, 4, elements=st.floats(-1, 1, allow_nan=False)))
def test_transform_locally_lipschitz(vals, pert):
    J = spd(vals, 2)
    nu = np.linalg.eigvalsh(J)[0]
    D = pert.reshape(2, 2)
    D = 0.5 * (D + D.T)
    D *= 0.5 * nu / max(np.linalg.norm(D, 2), 1e-300)
    T0 = diagonalizing_transform(J).matrix
    ratios = []
    for s in (1.0, 0.1, 0.01):
        dT = np.linalg.norm(diagonalizing_transform(J + s * D).matrix - T0, 2)
        ratios.append(dT / (s * np.linalg.norm(D, 2) + 1e-300))
    # C from the inverse square root's derivative at the smallest eigenvalue (nu/2 margin)
    C = 4.0 * (0.5 * nu) ** -1.5
    assert max(ratios) <= C


# ----------------------------------------------------------------------------
# field families
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("J", [
    DiagonalDiffusion([1.0, 2.0], q=[[0.3, 0.1], [0.0, 0.4]]),
    AffineDiffusion(np.array([[2.0, 0.3], [0.3, 1.0]]),
                    np.array([[[0.2, 0.1], [0.1, 0.0]], [[0.0, -0.1], [-0.1, 0.3]]]), 0.1),
])
def test_diffusion_derivative_matches_differences(J):
    z = np.array([0.3, -0.4])
    d = np.asarray(J.derivative(z))
    for i, e in enumerate(np.eye(2)):
        fd = (np.asarray(J.value(z + 1e-6 * e)) - np.asarray(J.value(z - 1e-6 * e))) / 2e-6
        assert np.allclose(d[i], fd, atol=1e-8)
    assert np.array_equal(J.value(z), np.swapaxes(J.value(z), -1, -2))


@pytest.mark.parametrize("V", [QuadraticWell(0.7, [0.1, -0.2], 2.0),
                               GaussianWells(3.0, (1.0, 0.5), ((-0.5, 0.2), (0.6, -0.3)), (0.7, 0.4))])
def test_potential_gradient_second_order(V):
    z = np.array([0.25, 0.4])
    g = V.gradient(z)
    errs = []
    for h in (1e-2, 5e-3):
        fd = np.array([(V.value(z + h * e) - V.value(z - h * e)) / (2 * h) for e in np.eye(2)])
        errs.append(np.linalg.norm(fd - g))
    assert errs[1] < 0.3 * errs[0] or errs[1] < 1e-12
    H = V.hessian(z)
    assert np.allclose(H, H.T)


def test_field_validation():
    with pytest.raises(DomainError):
        QuadraticWell(-1.0, [0.0], 1.0).validate(np.array([[0.0], [3.0]]))
    with pytest.raises(EllipticityError):
        DiagonalDiffusion([1.0, 1.0], q=[[-2.0, 0.0], [0.0, 0.0]], nu=0.5).validate(np.array([[1.0, 0.0]]))
    identity_diffusion(2).validate(np.zeros((3, 2)))
    ConstantPotential(1.0).validate(np.zeros((3, 2)))
