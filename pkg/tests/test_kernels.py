import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concentra import _kernels_py as pure
from concentra import kernels
from concentra.discretization import build_grid, stiffness_matrix

compiled = kernels.compiled
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def _case(seed, size=200):
    gen = np.random.default_rng(seed)
    grid = build_grid(1, 2.0, size + 2)
    K = stiffness_matrix(grid, np.eye(1)).tocsr()
    u = gen.uniform(-0.5, 3.0, size)
    wv = gen.uniform(0.5, 2.0, size) * grid.h
    inside = (gen.uniform(size=size) < 0.5).astype(np.uint8)
    return K, u, wv, grid.h, inside


@needs_compiled
@settings(max_examples=30)
@given(st.integers(0, 10**6), st.booleans(), st.floats(1.5, 4.5))
def test_energy_and_gradient_parity(seed, penalized, p):
    K, u, wv, w, inside = _case(seed)
    ell, slope = 0.8, 0.8 ** (p - 1)
    g1, g2 = np.empty_like(u), np.empty_like(u)
    e1 = pure.fused_energy_gradient(K, u, wv, w, inside, penalized, p, ell, slope, g1)
    e2 = compiled.fused_energy_gradient(compiled.as_csr(K), u, wv, w, inside, penalized, p, ell, slope, g2)
    assert e2 == pytest.approx(e1, rel=1e-12, abs=1e-14)
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-14)
    assert compiled.energy_only(compiled.as_csr(K), u, wv, w, inside, penalized, p, ell, slope) == \
        pytest.approx(e1, rel=1e-12, abs=1e-14)


@needs_compiled
@settings(max_examples=30)
@given(st.integers(0, 10**6), st.booleans(), st.floats(1.5, 4.5), st.floats(0.1, 3.0))
def test_curvature_and_moment_parity(seed, penalized, p, t):
    _, u, _, w, inside = _case(seed)
    ell, slope = 0.8, 0.8 ** (p - 1)
    c1, c2 = np.empty_like(u), np.empty_like(u)
    pure.nonlinear_curvature(u, w, inside, penalized, p, ell, slope, c1)
    compiled.nonlinear_curvature(u, w, inside, penalized, p, ell, slope, c2)
    assert np.allclose(c1, c2, rtol=1e-12, atol=0)
    m1 = pure.nonlinear_moment(u, inside, penalized, p, ell, slope, t)
    m2 = compiled.nonlinear_moment(u, inside, penalized, p, ell, slope, t)
    assert m2 == pytest.approx(m1, rel=1e-12)


@needs_compiled
@pytest.mark.parametrize("N,U0", [(1, 1.4), (1, 1.5), (3, 4.0), (3, 4.5)])
def test_shooting_parity(N, U0):
    s1, n1, U1, V1 = pure.shoot(U0, N, 3.0, 0.01, 2000)
    s2, n2, U2, V2 = compiled.shoot(U0, N, 3.0, 0.01, 2000)
    assert (s1, n1) == (s2, n2)
    assert np.allclose(U1[:n1], np.asarray(U2)[:n2], rtol=1e-12, atol=1e-14)
    assert np.allclose(V1[:n1], np.asarray(V2)[:n2], rtol=1e-12, atol=1e-14)


def test_fallback_selected_by_environment():
    code = "from concentra import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CONCENTRA_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_runtime_switch():
    before = kernels.BACKEND
    try:
        kernels.use("python")
        assert kernels.active is pure
        with pytest.raises(ValueError):
            kernels.use("gpu")
    finally:
        kernels.use(before)
    assert kernels.BACKEND == before


def test_energy_identical_under_both_backends():
    from concentra.discretization import DiscreteEnergy, ProblemSpec
    from concentra.fields import QuadraticWell, identity_diffusion

    grid = build_grid(2, 2.0, 33)
    spec = ProblemSpec(grid, QuadraticWell(1.0, [0.1, 0.0]), identity_diffusion(2), 3.0)
    u = np.exp(-np.sum(grid.points() ** 2, axis=1))
    before = kernels.BACKEND
    vals = []
    try:
        for b in ("python",) + (("compiled",) if compiled is not None else ()):
            kernels.use(b)
            vals.append(DiscreteEnergy(spec, 0.5, "raw").value_and_gradient(u))
    finally:
        kernels.use(before)
    for e, g in vals[1:]:
        assert e == pytest.approx(vals[0][0], rel=1e-13)
        assert np.allclose(g, vals[0][1], rtol=1e-12, atol=1e-15)
