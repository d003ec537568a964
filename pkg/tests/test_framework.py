import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldplab.framework import (
    AssumptionParams,
    GelfandIndex,
    SineSampler,
    audit_assumptions,
    constant_spread,
    norm,
    pairing,
)
from ldplab.galerkin import GalerkinSpace, HminusTriple, L2Triple
from ldplab.models import make_burgers, make_heat, make_linear, make_plaplace, make_pme


TRIPLES = {
    "w12": L2Triple(GalerkinSpace(20), 2.0),
    "w14": L2Triple(GalerkinSpace(20), 4.0),
    "l4": HminusTriple(GalerkinSpace(20), 4.0),
}


def test_index_and_params_validation():
    assert GelfandIndex(3, "V").space_tag.value == "V"
    with pytest.raises(ValueError):
        GelfandIndex(0, "H")
    with pytest.raises(ValueError):
        GelfandIndex(2, "W")
    for bad in [dict(alpha=1.0, beta=0, eta=1), dict(alpha=2, beta=-1, eta=1), dict(alpha=2, beta=0, eta=0)]:
        with pytest.raises(ValueError):
            AssumptionParams(**bad)


def test_pairing_is_bilinear_and_identifies_h():
    rng = np.random.default_rng(0)
    v = rng.normal(size=20)
    assert pairing(np.zeros(20), v) == 0.0
    for tri in TRIPLES.values():
        u, w = rng.normal(size=(2, 100, 20))
        np.testing.assert_allclose(pairing(tri.embed_h(u), w), tri.h_inner(u, w), rtol=1e-12, atol=1e-14)
    f, v1, v2 = rng.normal(size=(3, 20))
    a, b = rng.normal(size=2)
    assert pairing(f, a * v1 + b * v2) == pytest.approx(a * pairing(f, v1) + b * pairing(f, v2), rel=1e-12, abs=1e-13)
    with pytest.raises(ValueError):
        pairing(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("key", sorted(TRIPLES))
@pytest.mark.parametrize("tag", ["H", "V", "Vstar"])
def test_norm_axioms(key, tag):
    tri = TRIPLES[key]
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=(2, 1000, 20))
    lam = rng.normal(size=(1000,))
    nu, nv = norm(tag, u, tri), norm(tag, v, tri)
    assert np.all(nu > 0)
    assert norm(tag, np.zeros(20), tri) == 0.0
    np.testing.assert_allclose(norm(tag, lam[:, None] * u, tri), np.abs(lam) * nu, rtol=1e-8)
    assert np.all(norm(tag, u + v, tri) <= (nu + nv) * (1 + 1e-9))


def test_norm_errors():
    tri = TRIPLES["w12"]
    with pytest.raises(ValueError):
        norm("X", np.zeros(20), tri)
    with pytest.raises(ValueError):
        norm("H", np.zeros(19), tri)
    with pytest.raises(ValueError):
        norm("H", np.full(20, np.nan), tri)


def test_dual_norm_bounds_self_pairing():
    tri = TRIPLES["w12"]
    v = np.random.default_rng(2).normal(size=(200, 20))
    assert np.all(norm("Vstar", v, tri) * norm("V", v, tri) >= pairing(v, v) * (1 - 1e-12))


def test_sine_v_norm_on_128_nodes():
    tri = L2Triple(GalerkinSpace(128), 2.0)
    v = np.sin(np.pi * tri.space.nodes)
    assert norm("V", v, tri) == pytest.approx(np.pi * np.sqrt(0.5), rel=0.01)


def test_sampler_is_bounded_in_v():
    sp = GalerkinSpace(40)
    x = SineSampler(n_modes=8, amplitude=2.0).sample(np.random.default_rng(0), 500, sp)
    tri = L2Triple(sp, 2.0)
    # |a_k k^-1| |grad sin(k pi x)| <= pi for every mode
    assert np.all(tri.v_norm(x) <= 2.0 * 8 * np.pi / np.sqrt(2) + 1e-9)


def test_plaplace_audit_passes():
    rep = audit_assumptions(make_plaplace(), n=2000, seed=4)
    assert rep.passed
    assert rep.calibrated
    assert {r["condition_id"] for r in rep.records()} >= {"A1", "A2", "A3", "B_growth", "B_lipschitz", "coercivity"}


def test_heat_eta_is_two():
    rep = audit_assumptions(make_heat(), n=1000, seed=0)
    assert rep.passed
    assert rep.fitted_constants["A2_eta"] == pytest.approx(2.0, rel=0.01)


def test_burgers_and_pme_audit_pass():
    for model in (make_burgers(), make_pme()):
        rep = audit_assumptions(model, n=1000, seed=5)
        assert rep.passed, rep.violations[:3]


def test_audit_is_deterministic_and_serializes():
    a = audit_assumptions(make_pme(n_dof=15), n=300, seed=9)
    b = audit_assumptions(make_pme(n_dof=15), n=300, seed=9)
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    for rec in doc["conditions"]:
        assert set(rec) == {"condition_id", "n_samples", "n_violations", "fitted_constant", "worst_margin"}


def test_audit_reports_violations_for_wrong_constants():
    model = make_heat(n_dof=15)
    params = AssumptionParams(alpha=2.0, beta=0.0, eta=3.0, big_k=0.0, big_c=1e-6)
    rep = audit_assumptions(model, n=200, params=params, seed=1)
    assert not rep.passed
    assert rep.n_violations("A2") == 200
    idx = [v.sample_index for v in rep.violations]
    assert idx == sorted(idx)


def test_evaluation_failure_is_recorded_not_raised():
    class Exploding:
        time_dependent = False

        def __call__(self, t, v):
            out = -np.asarray(v, dtype=float)
            out = np.where(np.abs(v).max(axis=-1, keepdims=True) > 0.5, np.nan, out)
            return out

        def jacobian(self, t, v):
            raise NotImplementedError

    from dataclasses import replace
    model = replace(make_linear(2), drift=Exploding())
    rep = audit_assumptions(model, n=100, seed=0)
    assert not rep.passed
    assert any(v.diagnostic == "non-finite evaluation" for v in rep.violations)


def test_fitted_constants_are_stable_across_batches():
    model = make_plaplace(n_dof=15)
    a = audit_assumptions(model, n=2000, seed=1)
    b = audit_assumptions(model, n=2000, seed=2)
    assert max(constant_spread(a, b).values()) <= 0.10


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_plaplace_scalar_monotonicity(a, b):
    # scalar form of the p=4 inequality used for eta = 2^{2-p}
    lhs = (abs(a) ** 2 * a - abs(b) ** 2 * b) * (a - b)
    assert lhs >= 0.25 * abs(a - b) ** 4 - 1e-12
