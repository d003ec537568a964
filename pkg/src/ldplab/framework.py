"""Operator contracts for dX = A(t, X) dt + B(X) dW and a sampling auditor.

The auditor checks hemicontinuity, local monotonicity, growth, the two noise
bounds and the derived coercivity inequality on random states.  Constants in
those inequalities are existential, so the auditor fits the smallest feasible
value on a pilot sample, freezes it with a safety factor, and re-checks on a
fresh sample drawn from an independent seed.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .noise import derive_seed

__all__ = [
    "SpaceTag",
    "GelfandIndex",
    "AssumptionParams",
    "Violation",
    "AssumptionReport",
    "SineSampler",
    "pairing",
    "norm",
    "audit_assumptions",
    "calibrate_constants",
    "common_constant",
    "constant_spread",
    "CONDITIONS",
]

SAFETY_FACTOR = 1.25
HEMICONTINUITY_TOL = 1e-6
HEMICONTINUITY_STEP = 1e-6
ROUNDING_TOL = 1e-9

CONDITIONS = ("A1", "A2", "A3", "B_growth", "B_lipschitz", "coercivity", "rho_growth")
C_CONDITIONS = ("A3", "B_growth", "B_lipschitz", "coercivity", "rho_growth")


class SpaceTag(str, Enum):
    H = "H"
    V = "V"
    VSTAR = "Vstar"


@dataclass(frozen=True)
class GelfandIndex:
    dim_v: int
    space_tag: SpaceTag

    def __post_init__(self):
        if self.dim_v < 1:
            raise ValueError("dim_v must be >= 1")
        object.__setattr__(self, "space_tag", SpaceTag(self.space_tag))


@dataclass(frozen=True)
class AssumptionParams:
    """alpha, beta, eta, K of the monotonicity/growth conditions; C is the common constant.

    ``big_c = None`` asks the auditor to fit C on a pilot sample.
    """

    alpha: float
    beta: float
    eta: float
    big_k: float = 0.0
    big_c: float | None = None

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")


def pairing(f: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Duality pairing of a V*-vector (load vector) with a V-vector."""
    f = np.asarray(f, dtype=float)
    v = np.asarray(v, dtype=float)
    if f.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {f.shape[-1]} vs {v.shape[-1]}")
    return np.sum(f * v, axis=-1)


def norm(space, v: np.ndarray, triple) -> np.ndarray:
    """Discrete H, V or V* norm of ``v`` in the given norm structure."""
    tag = SpaceTag(space)
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != triple.n_dof:
        raise ValueError(f"vector has {v.shape[-1]} entries, space has {triple.n_dof}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries")
    if tag is SpaceTag.H:
        return triple.h_norm(v)
    if tag is SpaceTag.V:
        return triple.v_norm(v)
    return triple.vstar_norm(v)


@dataclass(frozen=True)
class SineSampler:
    """Random states ``amplitude * sum_k a_k k^-decay sin(k pi x)``, a_k ~ U[-1, 1].

    Bounded in V by construction.  On Euclidean spaces the coordinates are
    drawn uniformly from ``[-amplitude, amplitude]``.
    """

    n_modes: int = 8
    amplitude: float = 1.0
    decay: float = 1.0
    t_max: float = 1.0

    def sample(self, rng: np.random.Generator, n: int, space) -> np.ndarray:
        if getattr(space, "kind", "") == "euclidean":
            return self.amplitude * rng.uniform(-1.0, 1.0, size=(n, space.n_dof))
        k = np.arange(1, self.n_modes + 1)
        a = rng.uniform(-1.0, 1.0, size=(n, self.n_modes)) * k ** -self.decay
        basis = np.sin(np.pi * k[:, None] * space.nodes[None, :])
        return self.amplitude * a @ basis


@dataclass
class Violation:
    condition_id: str
    sample_index: int
    lhs: float
    rhs: float
    diagnostic: str = ""


@dataclass
class AssumptionReport:
    model_id: str
    n_samples: int
    seed: int
    params: AssumptionParams
    rho_const: float | None
    violations: list[Violation] = field(default_factory=list)
    fitted_constants: dict[str, float] = field(default_factory=dict)
    worst_margin: dict[str, float] = field(default_factory=dict)
    calibrated: bool = False

    @property
    def passed(self) -> bool:
        return not self.violations

    def n_violations(self, condition_id: str) -> int:
        return sum(v.condition_id == condition_id for v in self.violations)

    def records(self) -> list[dict]:
        """One record per checked condition."""
        out = []
        for cid in CONDITIONS:
            if cid not in self.worst_margin:
                continue
            out.append(
                {
                    "condition_id": cid,
                    "n_samples": self.n_samples,
                    "n_violations": self.n_violations(cid),
                    "fitted_constant": self.fitted_constants.get(cid),
                    "worst_margin": self.worst_margin[cid],
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "calibrated": self.calibrated,
            "params": asdict(self.params),
            "rho_const": self.rho_const,
            "conditions": self.records(),
            "fitted_constants": dict(self.fitted_constants),
            "violations": [asdict(v) for v in self.violations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Sampled evaluation of every condition
# --------------------------------------------------------------------------


def _draw(model, sampler: SineSampler, n: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    space = model.triple.space
    return {
        "v1": sampler.sample(rng, n, space),
        "v2": sampler.sample(rng, n, space),
        "v3": sampler.sample(rng, n, space),
        "t": rng.uniform(0.0, sampler.t_max, size=n),
        "s": rng.uniform(-1.0, 1.0, size=n),
    }


def _drift(model, t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Drift at per-sample times."""
    if model.drift.time_dependent:
        return model.drift(t, v)
    return model.drift(0.0, v)


def _evaluate(model, draw: dict, params: AssumptionParams) -> dict:
    """Left sides and base right sides (before multiplying by a constant)."""
    tri = model.triple
    v1, v2, v3, t, s = draw["v1"], draw["v2"], draw["v3"], draw["t"], draw["s"]
    alpha, beta, eta = params.alpha, params.beta, params.eta
    w = v1 - v2
    a1 = _drift(model, t, v1)
    a2 = _drift(model, t, v2)
    h1, h2, hw = tri.h_norm(v1), tri.h_norm(v2), tri.h_norm(w)
    n1, n2, nw = tri.v_norm(v1), tri.v_norm(v2), tri.v_norm(w)
    out = {}

    # (A1) three-point secant test of s -> <A(t, v1 + s v2), v3>
    hstep = HEMICONTINUITY_STEP
    phis = [pairing(_drift(model, t, v1 + (s + d)[:, None] * v2), v3) for d in (-hstep, 0.0, hstep)]
    defect = np.abs(phis[1] - 0.5 * (phis[0] + phis[2]))
    scale = 1.0 + np.abs(phis[0]) + np.abs(phis[1]) + np.abs(phis[2])
    out["A1"] = (defect / scale, np.ones_like(defect))

    # (A2) local monotonicity
    mono = 2.0 * pairing(a1 - a2, w)
    out["A2_mono"] = mono
    out["A2_vterm"] = nw ** alpha
    out["A2_hterm"] = hw ** 2
    out["rho_shape_v2"] = model.rho_shape(v2) if model.rho_shape is not None else np.zeros_like(h2)

    # (A3) growth
    astar = tri.vstar_norm(a1)
    out["A3"] = (astar ** (alpha / (alpha - 1.0)), (1.0 + n1 ** alpha) * (1.0 + h1 ** beta))

    # noise bounds
    out["B_growth"] = (model.diffusion.hs_norm(v1, "V") ** 2, 1.0 + n1 ** 2)
    dcols = model.diffusion.columns(v1) - model.diffusion.columns(v2)
    out["B_lipschitz"] = (np.sum(tri.h_norm(dcols) ** 2, axis=-1), hw ** 2)

    # coercivity of A and B together
    coer = pairing(a1, v1) + model.diffusion.hs_norm(v1, "H") ** 2 + 0.5 * eta * n1 ** alpha
    out["coercivity"] = (coer, 1.0 + h1 ** 2)

    if model.rho_shape is not None:
        rho2 = (model.rho_const or 0.0) * out["rho_shape_v2"]
        out["rho_growth"] = (rho2, (1.0 + n2 ** alpha) * (1.0 + h2 ** beta))
    return out


def _evaluate_chunked(model, draw: dict, params, chunk: int, workers: int) -> dict:
    n = len(draw["t"])
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]

    def run(b):
        sub = {k: v[b[0] : b[1]] for k, v in draw.items()}
        try:
            return _evaluate(model, sub, params)
        except Exception:
            return _evaluate_one_by_one(model, sub, params)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    merged = {}
    for key in parts[0]:
        if isinstance(parts[0][key], tuple):
            merged[key] = tuple(np.concatenate([p[key][j] for p in parts]) for j in range(2))
        else:
            merged[key] = np.concatenate([p[key] for p in parts])
    return merged


def _evaluate_one_by_one(model, draw, params):
    """Fallback isolating failing samples; failures become NaN (reported as violations)."""
    n = len(draw["t"])
    rows = []
    for i in range(n):
        sub = {k: v[i : i + 1] for k, v in draw.items()}
        try:
            rows.append(_evaluate(model, sub, params))
        except Exception:
            rows.append(None)
    template = next((r for r in rows if r is not None), None)
    if template is None:
        raise RuntimeError("model evaluation failed on every sample")
    nan_row = {
        k: (tuple(np.full(1, np.nan) for _ in v) if isinstance(v, tuple) else np.full(1, np.nan))
        for k, v in template.items()
    }
    rows = [r if r is not None else nan_row for r in rows]
    merged = {}
    for key in template:
        if isinstance(template[key], tuple):
            merged[key] = tuple(np.concatenate([r[key][j] for r in rows]) for j in range(2))
        else:
            merged[key] = np.concatenate([r[key] for r in rows])
    return merged


def _max_ratio(lhs, base):
    ok = base > 0
    if not np.any(ok):
        return 0.0
    return float(np.nanmax(np.where(ok, lhs / np.where(ok, base, 1.0), -np.inf)))


def _fit(ev: dict, params: AssumptionParams, has_rho: bool) -> dict:
    """Smallest feasible constant per condition.

    C and the rho constant are nonnegative, so a negative supremum is clamped
    to zero; K may be negative and is reported as is.
    """
    fitted = {"A1": float(np.nanmax(ev["A1"][0]))}
    hterm = ev["A2_hterm"]
    lhs = ev["A2_mono"] + params.eta * ev["A2_vterm"]
    if has_rho:
        fitted["A2"] = max(_max_ratio(lhs - params.big_k * hterm, ev["rho_shape_v2"] * hterm), 0.0)
    else:
        fitted["A2"] = _max_ratio(lhs, hterm)
    for cid in C_CONDITIONS:
        if cid in ev:
            fitted[cid] = max(_max_ratio(*ev[cid]), 0.0)
    return fitted


def _eta_fit(ev: dict, params: AssumptionParams, rho_const: float) -> float:
    """Largest eta compatible with the declared K and rho on this sample."""
    slack = -ev["A2_mono"] + (params.big_k + rho_const * ev["rho_shape_v2"]) * ev["A2_hterm"]
    ok = ev["A2_vterm"] > 0
    return float(np.nanmin(np.where(ok, slack / np.where(ok, ev["A2_vterm"], 1.0), np.inf)))


def common_constant(fitted: dict) -> float:
    """The single C shared by the growth, noise and coercivity bounds."""
    return max(fitted.get(c, 0.0) for c in C_CONDITIONS)


STABILITY_KEYS = ("A2", "A3", "B_growth", "B_lipschitz", "coercivity", "rho_growth", "A2_eta")


def constant_spread(a: "AssumptionReport", b: "AssumptionReport") -> dict[str, float]:
    """Relative disagreement of fitted constants between two independent batches.

    Each difference is scaled by the larger of the two values and the common
    constant C, since every C-type bound shares that single constant.
    """
    scale_c = max(common_constant(a.fitted_constants), common_constant(b.fitted_constants))
    out = {}
    for key in STABILITY_KEYS:
        if key in a.fitted_constants and key in b.fitted_constants:
            x, y = a.fitted_constants[key], b.fitted_constants[key]
            scale = max(abs(x), abs(y), scale_c if key != "A2_eta" else 0.0)
            out[key] = abs(x - y) / scale if scale > 0 else 0.0
    return out


def calibrate_constants(model, sampler: SineSampler | None = None, n: int = 1000, seed: int = 0,
                        params: AssumptionParams | None = None) -> tuple[AssumptionParams, float | None]:
    """Fit C (and the rho constant) on a pilot sample and freeze them with a safety factor."""
    sampler = sampler or SineSampler()
    params = params or model.assumption_params
    ev = _evaluate_chunked(model, _draw(model, sampler, n, derive_seed(seed, "pilot")), params, 2000, 1)
    fitted = _fit(ev, params, model.rho_shape is not None)
    big_c = params.big_c if params.big_c is not None else SAFETY_FACTOR * max(common_constant(fitted), 1e-12)
    rho_const = model.rho_const
    if model.rho_shape is not None and rho_const is None:
        rho_const = SAFETY_FACTOR * fitted["A2"]
    return replace(params, big_c=big_c), rho_const


def audit_assumptions(model, sampler: SineSampler | None = None, n: int = 1000,
                      params: AssumptionParams | None = None, seed: int = 0,
                      workers: int | None = None) -> AssumptionReport:
    """Check the assumptions on ``n`` sampled (v1, v2, v, t, s) tuples.

    Constants left unspecified (``params.big_c is None`` or a model whose rho
    constant is unset) are fitted on a separate pilot sample first.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sampler = sampler or SineSampler()
    params = params or model.assumption_params
    workers = workers or int(os.environ.get("LDPLAB_WORKERS", "1"))
    calibrated = params.big_c is None or (model.rho_shape is not None and model.rho_const is None)
    rho_const = model.rho_const
    if calibrated:
        params, rho_const = calibrate_constants(model, sampler, n, seed, params)
        model = replace(model, rho_const=rho_const)
    ev = _evaluate_chunked(model, _draw(model, sampler, n, seed), params, 2000, workers)
    has_rho = model.rho_shape is not None
    fitted = _fit(ev, params, has_rho)
    fitted["A2_eta"] = _eta_fit(ev, params, rho_const or 0.0)

    checks = {}
    checks["A1"] = (ev["A1"][0], np.full_like(ev["A1"][0], HEMICONTINUITY_TOL), np.ones_like(ev["A1"][0]))
    mono_lhs = ev["A2_mono"] + params.eta * ev["A2_vterm"]
    mono_rhs = (params.big_k + (rho_const or 0.0) * ev["rho_shape_v2"]) * ev["A2_hterm"]
    checks["A2"] = (mono_lhs, mono_rhs, np.abs(ev["A2_mono"]) + params.eta * ev["A2_vterm"] + np.abs(mono_rhs))
    for cid in C_CONDITIONS:
        if cid in ev:
            lhs, base = ev[cid]
            rhs = params.big_c * base
            checks[cid] = (lhs, rhs, np.abs(lhs) + np.abs(rhs))

    violations = []
    worst = {}
    for cid, (lhs, rhs, scale) in checks.items():
        tol = 0.0 if cid == "A1" else ROUNDING_TOL
        margin = (lhs - rhs) / np.where(scale > 0, scale, 1.0)
        bad = ~np.isfinite(margin) | (lhs > rhs + tol * scale)
        worst[cid] = float(np.nanmax(margin)) if np.any(np.isfinite(margin)) else float("nan")
        for i in np.flatnonzero(bad):
            diag = "non-finite evaluation" if not np.isfinite(margin[i]) else ""
            violations.append(Violation(cid, int(i), float(lhs[i]), float(rhs[i]), diag))
    violations.sort(key=lambda v: (v.sample_index, CONDITIONS.index(v.condition_id)))
    return AssumptionReport(
        model_id=model.model_id,
        n_samples=n,
        seed=seed,
        params=params,
        rho_const=rho_const,
        violations=violations,
        fitted_constants=fitted,
        worst_margin=worst,
        calibrated=calibrated,
    )
