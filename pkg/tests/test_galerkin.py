import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldplab.galerkin import (
    EuclideanSpace,
    GalerkinSpace,
    HminusTriple,
    L2Triple,
    Tridiag,
    combine,
    solve_operator,
)


def _dense_mass(n):
    h = 1.0 / (n + 1)
    return h / 6.0 * (4 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1))


def test_mass_and_stiffness_match_textbook_matrices():
    sp = GalerkinSpace(9)
    h = sp.h
    np.testing.assert_allclose(sp.mass.to_dense(), _dense_mass(9), atol=1e-15)
    k = (2 * np.eye(9) - np.eye(9, k=1) - np.eye(9, k=-1)) / h
    np.testing.assert_allclose(sp.stiffness.to_dense(), k, atol=1e-12)


def test_assemble_matrix_reproduces_mass_and_stiffness():
    sp = GalerkinSpace(12)
    ones_q = np.ones((13, 3))
    np.testing.assert_allclose(sp.assemble_matrix(mass_q=ones_q).to_dense(), sp.mass.to_dense(), atol=1e-15)
    np.testing.assert_allclose(sp.assemble_matrix(diff_c=np.ones(13)).to_dense(), sp.stiffness.to_dense(),
                               atol=1e-12)


def test_advection_forms_are_transposes():
    sp = GalerkinSpace(10)
    c = np.random.default_rng(0).normal(size=(11, 3))
    a = sp.assemble_matrix(adv_q=c).to_dense()
    b = sp.assemble_matrix(adv_t_q=c).to_dense()
    np.testing.assert_allclose(a, b.T, atol=1e-13)


def test_gradient_operator_needs_dirichlet_boundary():
    sp = GalerkinSpace(7)
    g = sp.gradient_operator
    # interior constants are not annihilated because the boundary values are zero
    assert np.abs(g @ np.ones(7)).max() > 0
    np.testing.assert_allclose(g @ np.zeros(7), 0.0)
    v = np.random.default_rng(1).normal(size=7)
    np.testing.assert_allclose(g @ v, sp.cell_gradients(v))


def test_load_assembly_against_dense_quadrature():
    sp = GalerkinSpace(20)
    f = lambda x: np.cos(3 * x) + x ** 2  # noqa: E731
    load = sp.assemble_load(f(sp.quad_points))
    xs = np.linspace(0, 1, 200001)
    for j in (0, 7, 19):
        hat = np.maximum(0.0, 1 - np.abs(xs - sp.nodes[j]) / sp.h)
        ref = np.trapezoid(f(xs) * hat, xs)
        assert load[j] == pytest.approx(ref, rel=1e-6)


def test_v_norm_of_sine_matches_continuum():
    sp = GalerkinSpace(128)
    tri = L2Triple(sp, 2.0)
    v = np.sin(np.pi * sp.nodes)
    assert tri.v_norm(v) == pytest.approx(np.pi * np.sqrt(0.5), rel=0.01)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_w1p_dual_norm_is_attained_and_bounds_pairings(p):
    rng = np.random.default_rng(int(p))
    tri = L2Triple(GalerkinSpace(15), p)
    f = rng.normal(size=(5, 15))
    d = tri.vstar_norm(f)
    w = rng.normal(size=(4000, 15))
    ratios = (w @ f.T) / tri.v_norm(w)[:, None]
    assert np.all(ratios.max(axis=0) <= d * (1 + 1e-10))
    # brute force maximization over the dual variable from a dense optimizer
    from scipy.optimize import minimize

    for i in range(2):
        res = minimize(lambda x: -(f[i] @ x) / tri.v_norm(x), f[i], method="BFGS", options={"gtol": 1e-10})
        assert -res.fun == pytest.approx(d[i], rel=1e-6)


def test_lr_dual_norm_is_attained():
    rng = np.random.default_rng(5)
    tri = HminusTriple(GalerkinSpace(12), 4.0)
    f = rng.normal(size=(3, 12))
    d = tri.vstar_norm(f)
    from scipy.optimize import minimize

    for i in range(3):
        res = minimize(lambda x: -(f[i] @ x) / tri.v_norm(x), f[i], method="BFGS", options={"gtol": 1e-10})
        assert -res.fun == pytest.approx(d[i], rel=1e-6)
    np.testing.assert_allclose(tri.vstar_norm(np.zeros((2, 12))), 0.0)


def test_minus_one_inner_product_on_eigenvectors():
    sp = GalerkinSpace(40)
    tri = HminusTriple(sp, 4.0)
    modes = sp.sine_modes(6)
    lam = sp.dirichlet_eigenvalues[:6]
    np.testing.assert_allclose(tri.h_inner(modes, modes), 1.0 / lam, rtol=1e-10)


def test_sine_modes_are_generalized_eigenvectors():
    sp = GalerkinSpace(25)
    modes = sp.sine_modes(5)
    lam = sp.dirichlet_eigenvalues[:5]
    lhs = sp.stiffness.matvec(modes)
    rhs = lam[:, None] * sp.mass.matvec(modes)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    gram = modes @ sp.mass.to_dense() @ modes.T
    np.testing.assert_allclose(gram, np.eye(5), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 6), elements=st.floats(-1, 1)),
    arrays(np.float64, (3, 6), elements=st.floats(-1, 1)),
)
def test_batched_tridiagonal_solve_matches_dense(off, rhs):
    lower = off[0]
    upper = off[1]
    diag = 4.0 + np.abs(off[2])  # diagonally dominant
    op = Tridiag(np.tile(lower, (3, 1)), np.tile(diag, (3, 1)), np.tile(upper, (3, 1)))
    x = op.solve(rhs)
    dense = op.to_dense()
    np.testing.assert_allclose(np.einsum("bij,bj->bi", dense, x), rhs, atol=1e-12)
    shared = Tridiag(lower, diag, upper)
    np.testing.assert_allclose(shared.solve(rhs), x, atol=1e-12)


def test_combine_and_solve_operator_mix_dense_and_banded():
    sp = GalerkinSpace(8)
    dense = np.eye(8) * 3.0
    op = combine(sp.mass, 1.0, dense, 2.0)
    rhs = np.arange(8.0)
    x = solve_operator(op, rhs)
    np.testing.assert_allclose(op @ x, rhs, atol=1e-12)


def test_construction_validation():
    with pytest.raises(ValueError):
        GalerkinSpace(0)
    with pytest.raises(ValueError):
        EuclideanSpace(0)
    with pytest.raises(ValueError):
        GalerkinSpace(4).sine_modes(5)
