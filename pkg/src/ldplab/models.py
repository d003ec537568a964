"""Concrete drift/diffusion pairs: Burgers with reaction, p-Laplace, porous media, heat.

Each factory returns an immutable :class:`ModelSpec`.  Drifts return load
vectors (elements of V*) and know their own Jacobian, which the implicit
stepper uses for Newton iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .framework import AssumptionParams
from .galerkin import EuclideanSpace, EuclideanTriple, GalerkinSpace, HminusTriple, L2Triple, Tridiag
from .noise import DiffusionSpec, NoiseOperator

__all__ = [
    "ModelRejected",
    "ModelSpec",
    "make_heat",
    "make_plaplace",
    "make_burgers",
    "make_pme",
    "make_linear",
    "make_model",
    "MODEL_REGISTRY",
    "DEFAULT_N_DOF",
    "DEFAULT_M",
]

DEFAULT_N_DOF = 31
DEFAULT_M = 16

# 8-point Gauss-Legendre on [0, 1] for the averaged convection coefficient
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class ModelRejected(ValueError):
    """Parameters outside the regime in which the model is covered."""


def _default_diffusion(n_dof: int) -> DiffusionSpec:
    return DiffusionSpec.multiplicative_sine(min(DEFAULT_M, n_dof), 1.0)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A drift A(t, v), a diffusion B(v), and the constants they are declared to satisfy.

    ``rho(v) = rho_const * rho_shape(v)`` is the local monotonicity weight.
    ``rho_const = None`` means the constant is fitted by the auditor.
    """

    model_id: str
    triple: object
    drift: object
    diffusion_spec: DiffusionSpec
    params: dict
    assumption_params: AssumptionParams
    rho_shape: Callable | None = None
    rho_const: float | None = None
    rho_expression: str = "0"
    diffusion: NoiseOperator = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "diffusion", NoiseOperator(self.diffusion_spec, self.triple))

    @property
    def n_dof(self) -> int:
        return self.triple.n_dof

    @property
    def space(self):
        return self.triple.space

    @property
    def v_norm_kind(self) -> str:
        return self.triple.v_norm_kind

    def rho(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.rho_shape is None:
            return np.zeros(v.shape[:-1])
        if self.rho_const is None:
            raise ValueError("rho constant not fitted; run calibrate_constants first")
        return self.rho_const * self.rho_shape(v)

    def with_diffusion(self, spec: DiffusionSpec) -> "ModelSpec":
        return replace(self, diffusion_spec=spec)

    def describe(self) -> dict:
        return {
            "model_id": self.model_id,
            "n_dof": self.n_dof,
            "v_norm_kind": self.v_norm_kind,
            "params": {k: v for k, v in self.params.items() if isinstance(v, (int, float, str))},
            "diffusion": {"kind": self.diffusion_spec.kind, "m": self.diffusion_spec.m,
                          "label": self.diffusion_spec.label},
            "rho": self.rho_expression,
            "rho_const": self.rho_const,
        }


# --------------------------------------------------------------------------
# Drifts
# --------------------------------------------------------------------------


class LinearDrift:
    """``A(v) = -rate * v`` on a Euclidean space."""

    time_dependent = False

    def __init__(self, n: int, rate: float):
        self.n = n
        self.rate = float(rate)

    def __call__(self, t, v):
        return -self.rate * np.asarray(v, dtype=float)

    def jacobian(self, t, v):
        return Tridiag(np.zeros(self.n), np.full(self.n, -self.rate), np.zeros(self.n))


class PLaplaceDrift:
    """Weak form of ``div(|u'|^{p-2} u') - c |u|^{pt-2} u``; p = 2, c = 0 is the heat drift."""

    time_dependent = False

    def __init__(self, space: GalerkinSpace, p: float, p_tilde: float, c: float):
        self.space = space
        self.p = float(p)
        self.p_tilde = float(p_tilde)
        self.c = float(c)

    def __call__(self, t, v):
        sp = self.space
        v = np.asarray(v, dtype=float)
        if self.p == 2.0:
            out = -sp.stiffness.matvec(v)
        else:
            g = sp.cell_gradients(v)
            out = -sp.assemble_cell_derivative_load(np.abs(g) ** (self.p - 2.0) * g)
        if self.c:
            vq = sp.quad_values(v)
            out = out - self.c * sp.assemble_load(_signed_power(vq, self.p_tilde - 1.0))
        return out

    def jacobian(self, t, v):
        sp = self.space
        v = np.asarray(v, dtype=float)
        if self.p == 2.0 and not self.c:
            return sp.stiffness.scale(-1.0)
        if self.p == 2.0:
            diff = -np.ones(v.shape[:-1] + (sp.n_dof + 1,))
        else:
            g = sp.cell_gradients(v)
            diff = -(self.p - 1.0) * np.abs(g) ** (self.p - 2.0)
        mass = None
        if self.c and self.p_tilde != 1.0:
            vq = sp.quad_values(v)
            mass = -self.c * (self.p_tilde - 1.0) * np.abs(vq) ** (self.p_tilde - 2.0)
        return sp.assemble_matrix(mass_q=mass, diff_c=diff)


def _signed_power(x, a):
    return np.sign(x) * np.abs(x) ** a


class BurgersDrift:
    """Weak form of ``u'' + f(u) u' + g(u)`` with skew-symmetric convection.

    The convection form is ``conv(u, v) . psi = 1/2 int theta(u) (v' psi - psi' v)``
    with ``theta(u) = 2 int_0^1 tau f(tau u) dtau``.  It is consistent with
    ``f(u) u'`` for ``u = v`` and satisfies ``conv(u, v) . v = 0`` exactly.
    """

    time_dependent = False

    def __init__(self, space: GalerkinSpace, f, f_prime, g, g_prime, linear_f: bool):
        self.space = space
        self.f = f
        self.f_prime = f_prime
        self.g = g
        self.g_prime = g_prime
        self.linear_f = linear_f

    def theta(self, u):
        if self.linear_f:
            return (2.0 / 3.0) * self.f(1.0) * u
        return 2.0 * np.einsum("i,i...->...", _GL_W * _GL_X, self.f(_GL_X.reshape((-1,) + (1,) * u.ndim) * u))

    def theta_prime(self, u):
        if self.linear_f:
            return np.full_like(u, (2.0 / 3.0) * self.f(1.0))
        tau = _GL_X.reshape((-1,) + (1,) * u.ndim)
        return 2.0 * np.einsum("i,i...->...", _GL_W * _GL_X ** 2, self.f_prime(tau * u))

    def convection(self, u, v):
        sp = self.space
        uq = sp.quad_values(u)
        vq = sp.quad_values(v)
        th = self.theta(uq)
        vg = sp.cell_gradients(v)
        term1 = sp.assemble_load(th * vg[..., None])
        cell = np.einsum("...cq,q->...c", th * vq, sp.quad_weights)
        term2 = sp.assemble_cell_derivative_load(cell / sp.h)
        return 0.5 * (term1 - term2)

    def __call__(self, t, v):
        sp = self.space
        v = np.asarray(v, dtype=float)
        out = -sp.stiffness.matvec(v) + self.convection(v, v)
        if self.g is not None:
            out = out + sp.assemble_load(self.g(sp.quad_values(v)))
        return out

    def jacobian(self, t, v):
        sp = self.space
        v = np.asarray(v, dtype=float)
        vq = sp.quad_values(v)
        th = self.theta(vq)
        thp = self.theta_prime(vq)
        vg = sp.cell_gradients(v)[..., None]
        mass = 0.5 * thp * vg
        if self.g_prime is not None:
            mass = mass + self.g_prime(vq)
        adv = 0.5 * th
        adv_t = -0.5 * thp * vq - 0.5 * th
        diff = -np.ones(v.shape[:-1] + (sp.n_dof + 1,))
        return sp.assemble_matrix(mass_q=mass, adv_q=adv, adv_t_q=adv_t, diff_c=diff)


class PorousMediaDrift:
    """``L Psi(t, u) + Phi(t, u)`` with ``Psi = f(t)|u|^{r-1}u`` and ``Phi = g(t) u``.

    In the negative-order triple the pairing of ``L Psi`` with w is
    ``-int Psi w`` and the pairing of ``Phi`` with w is the H inner product.
    """

    time_dependent = True

    def __init__(self, triple: HminusTriple, r: float, f_t, g_t):
        self.triple = triple
        self.space = triple.space
        self.r = float(r)
        self.f_t = f_t
        self.g_t = g_t

    def _coefs(self, t, ndim):
        """f(t), g(t) broadcastable against the batch; ``t`` may be per-sample."""
        t = np.asarray(t, dtype=float)
        ft = np.asarray(self.f_t(t), dtype=float)
        gt = np.asarray(self.g_t(t), dtype=float)
        pad = (1,) * ndim
        return ft.reshape(ft.shape + pad), gt.reshape(gt.shape + pad)

    def __call__(self, t, v):
        sp = self.space
        v = np.asarray(v, dtype=float)
        ft, gt = self._coefs(t, 1)
        vq = sp.quad_values(v)
        out = -ft * sp.assemble_load(_signed_power(vq, self.r))
        if np.any(gt):
            out = out + gt * self.triple.embed_h(v)
        return out

    def jacobian(self, t, v):
        sp = self.space
        v = np.asarray(v, dtype=float)
        ft, gt = self._coefs(t, 2)
        vq = sp.quad_values(v)
        mat = sp.assemble_matrix(mass_q=self.r * np.abs(vq) ** (self.r - 1.0)).to_dense()
        return -ft * mat + gt * self.triple.h_gram


# --------------------------------------------------------------------------
# Factories
# --------------------------------------------------------------------------


def make_heat(n_dof: int = DEFAULT_N_DOF, diffusion: DiffusionSpec | None = None) -> ModelSpec:
    """Linear heat equation: ``A(v) = Delta v``, V = W_0^{1,2}."""
    space = GalerkinSpace(n_dof)
    triple = L2Triple(space, 2.0)
    return ModelSpec(
        model_id="heat",
        triple=triple,
        drift=PLaplaceDrift(space, 2.0, 2.0, 0.0),
        diffusion_spec=diffusion or _default_diffusion(n_dof),
        params={"n_dof": n_dof},
        assumption_params=AssumptionParams(alpha=2.0, beta=0.0, eta=2.0, big_k=0.0),
    )


def make_plaplace(p: float = 4.0, p_tilde: float = 2.0, c: float = 1.0, diffusion: DiffusionSpec | None = None,
                  n_dof: int = DEFAULT_N_DOF) -> ModelSpec:
    """Stochastic p-Laplace: ``div(|u'|^{p-2}u') - c|u|^{pt-2}u``; globally monotone."""
    if not p >= 2:
        raise ModelRejected(f"p-Laplace needs p >= 2, got p={p}")
    if not 1 <= p_tilde <= p:
        raise ModelRejected(f"p-Laplace needs 1 <= p_tilde <= p, got p_tilde={p_tilde}")
    if not c > 0:
        raise ModelRejected(f"p-Laplace needs c > 0, got c={c}")
    space = GalerkinSpace(n_dof)
    triple = L2Triple(space, float(p))
    return ModelSpec(
        model_id="plaplace",
        triple=triple,
        drift=PLaplaceDrift(space, p, p_tilde, c),
        diffusion_spec=diffusion or _default_diffusion(n_dof),
        params={"p": float(p), "p_tilde": float(p_tilde), "c": float(c), "n_dof": n_dof},
        assumption_params=AssumptionParams(alpha=float(p), beta=0.0, eta=2.0 ** (2.0 - p), big_k=0.0),
    )


def _numeric_derivative(fn):
    def d(x):
        h = 1e-6 * (1.0 + np.abs(x))
        return (fn(x + h) - fn(x - h)) / (2.0 * h)

    return d


def make_burgers(f: Callable | None = None, g_react: Callable | None = None, r: float = 3.0, s: float = 2.0,
                 diffusion: DiffusionSpec | None = None, *, d: int = 1, c1: float = 0.0, c2: float = 0.0,
                 f_prime: Callable | None = None, g_prime: Callable | None = None,
                 n_dof: int = DEFAULT_N_DOF) -> ModelSpec:
    """Burgers-type equation ``u'' + f(u)u' + g(u)`` on the unit interval.

    ``f`` defaults to the identity (classical Burgers) and ``g_react`` to
    ``-x^3 + c1 x^2 + c2 x``.  Only the one-dimensional regime with growth
    exponents r <= 3, s <= 2 is accepted.
    """
    if d != 1 or not (1.0 <= r <= 3.0) or not (1.0 <= s <= 2.0):
        raise ModelRejected(f"Burgers model is covered only for d=1, r=3, s=2 (got d={d}, r={r}, s={s})")
    space = GalerkinSpace(n_dof)
    triple = L2Triple(space, 2.0)
    linear_f = f is None
    if f is None:
        f = lambda x: np.asarray(x, dtype=float)  # noqa: E731
        f_prime = lambda x: np.ones_like(np.asarray(x, dtype=float))  # noqa: E731
    f_prime = f_prime or _numeric_derivative(f)
    if g_react is None:
        g_react = lambda x: -(x ** 3) + c1 * x ** 2 + c2 * x  # noqa: E731
        g_prime = lambda x: -3.0 * x ** 2 + 2.0 * c1 * x + c2  # noqa: E731
        g_expr = f"-x^3 + {c1:g} x^2 + {c2:g} x"
    else:
        g_expr = getattr(g_react, "__name__", "custom")
    g_prime = g_prime or _numeric_derivative(g_react)

    def rho_shape(v):
        return (1.0 + triple.v_norm(v) ** 2) * (1.0 + triple.h_norm(v) ** 2)

    return ModelSpec(
        model_id="burgers",
        triple=triple,
        drift=BurgersDrift(space, f, f_prime, g_react, g_prime, linear_f),
        diffusion_spec=diffusion or _default_diffusion(n_dof),
        params={"d": d, "r": float(r), "s": float(s), "c1": float(c1), "c2": float(c2), "g": g_expr,
                "f": "identity" if linear_f else getattr(f, "__name__", "custom"), "n_dof": n_dof},
        assumption_params=AssumptionParams(alpha=2.0, beta=4.0, eta=1.0, big_k=0.0),
        rho_shape=rho_shape,
        rho_const=None,
        rho_expression="C_rho * (1 + |v|_V^2) * (1 + |v|_H^2)",
    )


def _default_pme_f(t):
    return 1.0 + 0.5 * t


def _default_pme_g(t):
    return np.sin(t)


def make_pme(r: float = 3.0, psi: Callable | None = None, phi: Callable | None = None,
             diffusion: DiffusionSpec | None = None, *, t_max: float = 1.0,
             n_dof: int = DEFAULT_N_DOF) -> ModelSpec:
    """Porous media ``L(f(t)|u|^{r-1}u) + g(t)u`` in the triple L^{r+1} in H^{-1}.

    ``psi`` and ``phi`` are the time modulations f(t) > 0 and g(t).  The
    constants eta and K are computed from min f and max |g| on [0, t_max].
    """
    if not r > 1:
        raise ModelRejected(f"porous media needs r > 1, got r={r}")
    f_t = psi or _default_pme_f
    g_t = phi or _default_pme_g
    ts = np.linspace(0.0, t_max, 1001)
    fs = np.array([f_t(t) for t in ts])
    gs = np.array([g_t(t) for t in ts])
    if not np.all(fs > 0):
        raise ModelRejected("porous media needs f(t) > 0 on [0, t_max]")
    if not np.all(np.isfinite(gs)):
        raise ModelRejected("porous media needs g bounded on [0, t_max]")
    space = GalerkinSpace(n_dof)
    triple = HminusTriple(space, float(r) + 1.0)
    eta = 2.0 * float(fs.min()) * 2.0 ** (1.0 - r)
    big_k = 2.0 * float(np.abs(gs).max()) * (1.0 + 1e-9)
    return ModelSpec(
        model_id="pme",
        triple=triple,
        drift=PorousMediaDrift(triple, r, f_t, g_t),
        diffusion_spec=diffusion or _default_diffusion(n_dof),
        params={"r": float(r), "psi": getattr(f_t, "__name__", "custom"), "phi": getattr(g_t, "__name__", "custom"),
                "t_max": float(t_max), "n_dof": n_dof},
        assumption_params=AssumptionParams(alpha=float(r) + 1.0, beta=2.0, eta=eta, big_k=big_k),
    )


def make_linear(dim: int = 1, rate: float = 0.0, sigma=1.0, multiplicative: bool = False) -> ModelSpec:
    """Diagonal linear SDE ``dX = -rate X dt + diag(sigma) (X or 1) dW`` on R^dim.

    The zero-drift, additive scalar case is the calibration target for tail
    estimators; the additive diagonal case has a closed-form rate function.
    """
    space = EuclideanSpace(dim)
    triple = EuclideanTriple(space)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,))
    if multiplicative:
        weights = [np.where(np.arange(dim) == k, sig[k], 0.0) for k in range(dim)]
        spec = DiffusionSpec.multiplicative_constant(weights)
    else:
        spec = DiffusionSpec("additive_trace_class", dim, sigma=tuple(float(s) for s in sig),
                             label="diagonal", check_decay=False)
    return ModelSpec(
        model_id="linear",
        triple=triple,
        drift=LinearDrift(dim, rate),
        diffusion_spec=spec,
        params={"dim": dim, "rate": float(rate), "multiplicative": bool(multiplicative)},
        assumption_params=AssumptionParams(alpha=2.0, beta=0.0, eta=1.0, big_k=max(0.0, 1.0 - 2.0 * rate)),
    )


MODEL_REGISTRY: dict[str, Callable[..., ModelSpec]] = {
    "burgers": make_burgers,
    "plaplace": make_plaplace,
    "pme": make_pme,
    "heat": make_heat,
    "linear": make_linear,
}


def make_model(model_id: str, **params) -> ModelSpec:
    try:
        factory = MODEL_REGISTRY[model_id]
    except KeyError:
        raise ModelRejected(f"unknown model id {model_id!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**params)
