import numpy as np
import pytest

from ldplab.models import make_heat, make_linear, make_pme
from ldplab.noise import (
    DiffusionSpec,
    NoiseStream,
    apply_diffusion,
    derive_seed,
    hs_norm,
    sample_increments,
    sample_stream,
)


def test_stream_is_deterministic():
    a = sample_stream(1, 1.0, 1, 7)
    b = sample_stream(1, 1.0, 1, 7)
    assert a.increments[0, 0] == b.increments[0, 0]
    assert sample_stream(1, 1.0, 1, 8).increments[0, 0] != a.increments[0, 0]


def test_stream_is_read_only_and_validated():
    s = sample_stream(2, 0.1, 3, 1)
    with pytest.raises(ValueError):
        s.increments[0, 0] = 1.0
    for args in [(0, 0.1, 3, 1), (2, 0.0, 3, 1), (2, 0.1, -1, 1)]:
        with pytest.raises(ValueError):
            sample_stream(*args)
    with pytest.raises(ValueError):
        NoiseStream(m=2, dt=0.1, n_steps=3, seed=None, increments=np.zeros((3, 3)))


def test_mean_and_cross_covariance_within_clt_bounds():
    s = sample_stream(3, 0.01, 100_000, 123)
    x = s.increments
    se_mean = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    assert np.all(np.abs(x.mean(axis=0)) <= 4 * se_mean)
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        prod = x[:, i] * x[:, j]
        assert abs(prod.mean()) <= 4 * prod.std(ddof=1) / np.sqrt(prod.size)


def test_column_variance_matches_dt():
    dt = 0.02
    s = sample_stream(4, dt, 5000, 9)
    var = s.increments.var(axis=0, ddof=1)
    # SE of a sample variance of normals is dt * sqrt(2 / (n - 1))
    assert np.all(np.abs(var - dt) <= 5 * dt * np.sqrt(2 / 4999))


def test_per_path_streams_regenerate_individually():
    seeds = [derive_seed(42, i) for i in range(5)]
    batch = sample_increments(seeds, 3, 0.1, 20)
    single = sample_stream(3, 0.1, 20, seeds[3]).increments
    np.testing.assert_array_equal(batch[3], single)
    assert len(set(seeds)) == 5
    assert derive_seed(42, "pilot") != derive_seed(42, 0)


def test_additive_amplitudes_must_decay():
    with pytest.raises(ValueError):
        DiffusionSpec.additive([1.0, 0.5])  # 0.5 > 1 * 2^-2
    DiffusionSpec.additive([1.0, 0.25, 0.1])


def test_apply_diffusion_basic_cases():
    model = make_heat(20, DiffusionSpec.additive_decaying(4, 2.0))
    v = np.random.default_rng(0).normal(size=20)
    np.testing.assert_array_equal(apply_diffusion(model, v, np.zeros(4)), np.zeros(20))
    col = apply_diffusion(model, v, np.eye(4)[0])
    phi1 = model.space.sine_modes(1)[0]
    phi1 = phi1 / model.triple.h_norm(phi1)
    np.testing.assert_allclose(col, 2.0 * phi1, rtol=0, atol=1e-15)
    mult = make_heat(20, DiffusionSpec.multiplicative_sine(4))
    np.testing.assert_array_equal(apply_diffusion(mult, np.zeros(20), np.ones(4)), np.zeros(20))
    with pytest.raises(ValueError):
        apply_diffusion(model, v, np.zeros(3))
    with pytest.raises(ValueError):
        apply_diffusion(model, np.zeros(5), np.zeros(4))


def test_diffusion_is_linear_in_xi():
    model = make_pme(diffusion=DiffusionSpec.multiplicative_sine(6, 1.5))
    rng = np.random.default_rng(1)
    v = rng.normal(size=model.n_dof)
    a, b = rng.normal(size=(2, 6))
    lhs = apply_diffusion(model, v, 2.0 * a - 3.0 * b)
    rhs = 2.0 * apply_diffusion(model, v, a) - 3.0 * apply_diffusion(model, v, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_multiplicative_is_projection_of_pointwise_product():
    model = make_heat(30, DiffusionSpec.multiplicative_sine(3, 1.0))
    sp = model.space
    rng = np.random.default_rng(3)
    v = rng.normal(size=30)
    out = apply_diffusion(model, v, np.eye(3)[1])
    # the L2 projection u of w v satisfies int u psi_j = int w v psi_j for all j
    w = lambda x: 0.25 * np.sin(2 * np.pi * x)  # noqa: E731
    load = sp.assemble_load(w(sp.quad_points) * sp.quad_values(v))
    np.testing.assert_allclose(sp.mass.matvec(out), load, atol=1e-13)


def test_hs_norm_examples():
    add = make_heat(16, DiffusionSpec.additive_decaying(5, 1.0))
    rng = np.random.default_rng(4)
    vs = rng.normal(size=(10, 16))
    vals = hs_norm(add, vs, "H")
    np.testing.assert_allclose(vals, vals[0])
    mult = make_heat(16, DiffusionSpec.multiplicative_sine(5))
    v = vs[0]
    assert hs_norm(mult, 2 * v, "V") == pytest.approx(2 * hs_norm(mult, v, "V"), rel=1e-12)
    for target, nrm in (("H", mult.triple.h_norm), ("V", mult.triple.v_norm)):
        brute = np.sqrt(sum(nrm(apply_diffusion(mult, v, e)) ** 2 for e in np.eye(5)))
        assert hs_norm(mult, v, target) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        hs_norm(mult, v, "Vstar")


def test_multiplicative_lipschitz_bound_holds():
    model = make_heat(24, DiffusionSpec.multiplicative_sine(8, 2.0))
    lip = model.diffusion.lipschitz_bound_h()
    rng = np.random.default_rng(5)
    v1 = rng.normal(size=(1000, 24))
    v2 = rng.normal(size=(1000, 24))
    diff = np.sqrt(np.sum(model.triple.h_norm(model.diffusion.columns(v1) - model.diffusion.columns(v2)) ** 2,
                          axis=-1))
    assert np.all(diff <= lip * model.triple.h_norm(v1 - v2))


def test_affine_parts_reproduce_apply():
    for model in (make_heat(10, DiffusionSpec.multiplicative_sine(4)), make_heat(10, DiffusionSpec.additive_decaying(4, 1.0)),
                  make_linear(3, sigma=[1.0, 2.0, 0.5], multiplicative=True)):
        b0, b1 = model.diffusion.affine_parts()
        rng = np.random.default_rng(6)
        v = rng.normal(size=model.n_dof)
        u = rng.normal(size=model.diffusion.m)
        expected = b0 @ u + np.einsum("j,jab,b->a", u, b1, v)
        np.testing.assert_allclose(apply_diffusion(model, v, u), expected, atol=1e-12)
