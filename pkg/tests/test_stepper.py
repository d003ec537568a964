import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect

from ldplab.models import make_burgers, make_heat, make_linear, make_plaplace, make_pme
from ldplab.noise import DiffusionSpec, NoiseStream, derive_seed, sample_stream
from ldplab.stepper import (
    BlowUpError,
    NonconvergenceError,
    Path,
    StepperConfig,
    advance,
    implicit_step,
    simulate,
    solve_monotone,
)


def test_config_validation():
    for bad in [dict(dt=0), dict(dt=0.1, solver_tol=0), dict(dt=0.1, max_iters=0), dict(dt=0.1, scheme="rk4")]:
        with pytest.raises(ValueError):
            StepperConfig(**bad)


def test_solve_identity_minus_constant():
    c = np.array([1.0, -2.0, 3.5])
    x = solve_monotone(lambda x: x - c, np.zeros(3), StepperConfig(0.1))
    np.testing.assert_allclose(x, c, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 1.0))
def test_solve_scalar_cubic_against_bisection(b, dt):
    cfg = StepperConfig(dt, solver_tol=1e-12)
    f = lambda u: u + dt * u ** 3 - b  # noqa: E731
    x = solve_monotone(f, np.array([0.0]), cfg)[0]
    root = bisect(f, -25, 25, xtol=1e-14)
    assert abs(x - root) <= 1e-10 * max(1.0, abs(root))


def test_solve_cubic_example():
    f = lambda u: u + 0.1 * u ** 3 - 1.0  # noqa: E731
    x = solve_monotone(f, np.array([0.0]), StepperConfig(0.1, solver_tol=1e-13))[0]
    assert abs(x - bisect(f, 0, 1, xtol=1e-15)) <= 1e-10


def test_solve_spd_system_matches_direct():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(6, 6))
    a = a @ a.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    x, ok, hist = solve_monotone(lambda x: x @ a.T - b, np.zeros(6), StepperConfig(0.1, solver_tol=1e-12),
                                 return_info=True)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-10)
    assert ok.all()
    assert all(h1 <= h0 for h0, h1 in zip(hist, hist[1:]))


def test_solve_raises_with_history():
    with pytest.raises(NonconvergenceError) as info:
        solve_monotone(lambda x: x ** 2 + 1.0, np.array([0.3]), StepperConfig(0.1, max_iters=5))
    assert len(info.value.history) >= 1
    assert info.value.residual > 0


def test_zero_drift_step_is_exact():
    m = make_plaplace(n_dof=10)
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 10))
    np.testing.assert_array_equal(implicit_step(m, 0.0, x, 0.0, w, StepperConfig(0.1)), x + w)


def test_heat_step_is_linear_implicit_euler():
    m = make_heat(256)
    sp = m.space
    x = np.sin(np.pi * sp.nodes)
    cfg = StepperConfig(1e-4, solver_tol=1e-12)
    y = implicit_step(m, 0.0, x, 1.0, np.zeros(256), cfg)
    a = sp.mass.to_dense() + 1e-4 * sp.stiffness.to_dense()
    expected = np.linalg.solve(a, sp.mass.matvec(x))
    assert m.triple.h_norm(y - expected) <= 1e-10


@pytest.mark.parametrize("factory", [make_plaplace, make_burgers, make_pme])
def test_nonlinear_step_residual_by_substitution(factory):
    m = factory(n_dof=20)
    rng = np.random.default_rng(2)
    x = 2 * rng.normal(size=20)
    cfg = StepperConfig(1e-3, solver_tol=1e-10)
    y = implicit_step(m, 0.2, x, 1.0, np.zeros(20), cfg)
    r = y - x - cfg.dt * m.triple.riesz_h(m.drift(0.2, y))
    assert m.triple.h_norm(r) <= cfg.solver_tol


def test_negative_drift_scale_rejected():
    with pytest.raises(ValueError):
        implicit_step(make_heat(5), 0.0, np.zeros(5), -1.0, np.zeros(5), StepperConfig(0.1))


def test_advance_with_halving_matches_tolerance():
    m = make_plaplace(n_dof=15)
    x = 20 * np.random.default_rng(3).normal(size=(4, 15))
    cfg = StepperConfig(0.05, solver_tol=1e-10, max_iters=3)
    y, ok = advance(m, 0.0, x, 1.0, np.zeros_like(x), cfg)
    assert y.shape == x.shape and ok.dtype == bool


def test_zero_noise_zero_drift_path_is_constant():
    m = make_burgers(n_dof=10, diffusion=DiffusionSpec.zero(4))
    x0 = np.sin(np.pi * m.space.nodes)
    p = simulate(m, x0, 0.5, 1.0, StepperConfig(0.1), sample_stream(4, 0.1, 10, 0), mode="zero_drift")
    assert np.all(p.states == x0)
    assert p.meta["mode"] == "zero_drift"


def test_heat_decay_rate():
    m = make_heat(256, DiffusionSpec.zero(1))
    x0 = np.sin(np.pi * m.space.nodes)
    cfg = StepperConfig(1e-4)
    p = simulate(m, x0, 1.0, 0.1, cfg, sample_stream(1, 1e-4, 1000, 0))
    ratio = m.triple.h_norm(p.states[-1]) / m.triple.h_norm(x0)
    assert ratio == pytest.approx(np.exp(-np.pi ** 2 * 0.1), rel=0.02)


def _scaled_pair(model, eps, horizon, dt, seed, tol):
    cfg = StepperConfig(dt, solver_tol=tol)
    n = int(round(horizon / dt))
    stream = sample_stream(model.diffusion.m, dt, n, seed)
    x0 = 0.8 * np.sin(np.pi * model.space.nodes) if model.space.kind == "galerkin" else np.full(model.n_dof, 0.5)
    a = simulate(model, x0, eps, horizon, cfg, stream)
    cfg1 = StepperConfig(eps * dt, solver_tol=tol)
    stream1 = NoiseStream.from_increments(np.sqrt(eps) * stream.increments, eps * dt)
    b = simulate(model, x0, 1.0, eps * horizon, cfg1, stream1)
    return a, b


@pytest.mark.parametrize("factory", [make_heat, make_plaplace, make_burgers, make_pme])
def test_scaling_identity(factory):
    m = factory(n_dof=12, diffusion=DiffusionSpec.multiplicative_sine(6, 1.0))
    a, b = _scaled_pair(m, 0.3, 0.5, 0.05, 5, 1e-8)
    diff = m.triple.h_norm(a.states - b.states)
    assert np.max(diff) <= 1e-8


def test_determinism_and_serialization(tmp_path):
    m = make_burgers(n_dof=10, diffusion=DiffusionSpec.multiplicative_sine(4))
    x0 = np.sin(np.pi * m.space.nodes)
    cfg = StepperConfig(0.01)
    s = sample_stream(4, 0.01, 20, derive_seed(1, 0))
    a = simulate(m, x0, 0.5, 0.2, cfg, s)
    b = simulate(m, x0, 0.5, 0.2, cfg, s)
    assert a.to_bytes() == b.to_bytes()
    back = Path.from_bytes(a.to_bytes())
    np.testing.assert_array_equal(back.states, a.states)
    assert back.meta["model_id"] == "burgers" and back.meta["epsilon"] == 0.5
    csv = a.to_csv().splitlines()
    assert csv[0].startswith("time,x0") and len(csv) == 22


def test_path_validation():
    with pytest.raises(ValueError):
        Path(np.array([0.1, 0.2]), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Path(np.array([0.0, 0.1]), np.array([[0.0], [np.nan]]))
    with pytest.raises(ValueError):
        Path.from_bytes(b"garbage-record")


def test_simulate_input_errors():
    m = make_heat(8)
    cfg = StepperConfig(0.1)
    s = sample_stream(m.diffusion.m, 0.1, 10, 0)
    with pytest.raises(ValueError):
        simulate(m, np.zeros(8), 0.0, 1.0, cfg, s)
    with pytest.raises(ValueError):
        simulate(m, np.zeros(7), 0.5, 1.0, cfg, s)
    with pytest.raises(ValueError):
        simulate(m, np.zeros(8), 0.5, 1.0, cfg, sample_stream(3, 0.1, 10, 0))
    with pytest.raises(ValueError):
        simulate(m, np.zeros(8), 0.5, 1.05, cfg, s)
    with pytest.raises(ValueError):
        simulate(m, np.zeros(8), 0.5, 1.0, cfg, s, mode="skeleton")


def test_blow_up_is_reported():
    # implicit Euler multiplies by 1 / (1 - 0.95) = 20 per step
    m = make_linear(1, rate=-1.9, sigma=0.0)
    cfg = StepperConfig(0.5)
    with pytest.raises(BlowUpError) as info:
        simulate(m, np.array([1.0]), 1.0, 10.0, cfg, sample_stream(1, 0.5, 20, 0))
    assert info.value.step_index == 6
    assert info.value.last_state[0] == pytest.approx(20.0 ** 6)


def test_discrete_energy_inequality_along_path():
    m = make_burgers(n_dof=15, diffusion=DiffusionSpec.multiplicative_sine(6, 1.0))
    tri = m.triple
    eps, dt = 0.5, 0.01
    cfg = StepperConfig(dt, solver_tol=1e-12)
    s = sample_stream(6, dt, 50, 3)
    p = simulate(m, np.sin(np.pi * m.space.nodes), eps, 0.5, cfg, s)
    for k in range(50):
        x, y = p.states[k], p.states[k + 1]
        b = x + np.sqrt(eps) * m.diffusion.apply(x, s.increments[k])
        rhs = tri.h_norm(b) ** 2 + 2 * eps * dt * np.dot(m.drift(eps * k * dt, y), y)
        assert tri.h_norm(y) ** 2 <= rhs + 1e-9


def test_strong_error_halves_under_refinement():
    m = make_heat(15, DiffusionSpec.additive_decaying(8, 1.0))
    n_paths, horizon, n_ref = 400, 0.25, 256
    rng = np.random.default_rng(7)
    dw = rng.normal(size=(n_ref, n_paths, 8)) * np.sqrt(horizon / n_ref)
    x0 = np.tile(np.sin(np.pi * m.space.nodes), (n_paths, 1))

    def run(n_steps):
        cfg = StepperConfig(horizon / n_steps, solver_tol=1e-12)
        inc = dw.reshape(n_steps, n_ref // n_steps, n_paths, 8).sum(axis=1)
        x = x0.copy()
        for k in range(n_steps):
            x, ok = advance(m, k * cfg.dt, x, 1.0, m.diffusion.apply(x, inc[k]), cfg)
        return x

    ref = run(n_ref)
    err = [np.sqrt(np.mean(m.triple.h_norm(run(n) - ref) ** 2)) for n in (8, 16)]
    assert 0.3 <= err[1] / err[0] <= 0.8
