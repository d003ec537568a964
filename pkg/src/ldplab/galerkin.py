"""Piecewise-linear Galerkin spaces on the unit interval and their norm structures.

Vectors are nodal values at the interior nodes of a uniform grid of (0, 1)
with homogeneous Dirichlet boundary values.  Elements of V* are stored as
load vectors (their action on the nodal hat functions), so the duality
pairing is a plain dot product.  All routines accept a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_banded

__all__ = [
    "Tridiag",
    "GalerkinSpace",
    "EuclideanSpace",
    "L2Triple",
    "HminusTriple",
    "EuclideanTriple",
]

# 3-point Gauss-Legendre on [0, 1]
_GAUSS_S = 0.5 + 0.5 * np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
_GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0


class Tridiag:
    """Tridiagonal matrix (possibly a batch of them) stored by bands.

    ``lower[..., i]`` is entry (i, i-1) and ``upper[..., i]`` is entry
    (i, i+1); ``lower[..., 0]`` and ``upper[..., -1]`` are ignored.
    """

    __slots__ = ("lower", "diag", "upper")

    def __init__(self, lower, diag, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.diag = np.asarray(diag, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    @classmethod
    def identity(cls, n: int) -> "Tridiag":
        return cls(np.zeros(n), np.ones(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.diag.shape[-1]

    @property
    def shared(self) -> bool:
        return self.lower.ndim == self.diag.ndim == self.upper.ndim == 1

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        y[..., 1:] += self.lower[..., 1:] * x[..., :-1]
        y[..., :-1] += self.upper[..., :-1] * x[..., 1:]
        return y

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self.T.matvec(x)

    @property
    def T(self) -> "Tridiag":
        lo = np.zeros(np.broadcast_shapes(self.upper.shape, self.lower.shape))
        up = np.zeros_like(lo)
        lo[..., 1:] = self.upper[..., :-1]
        up[..., :-1] = self.lower[..., 1:]
        return Tridiag(lo, self.diag, up)

    def __add__(self, other: "Tridiag") -> "Tridiag":
        return Tridiag(self.lower + other.lower, self.diag + other.diag, self.upper + other.upper)

    def __sub__(self, other: "Tridiag") -> "Tridiag":
        return Tridiag(self.lower - other.lower, self.diag - other.diag, self.upper - other.upper)

    def scale(self, c) -> "Tridiag":
        """Multiply by a scalar or by a per-batch factor of shape (..., 1)."""
        return Tridiag(self.lower * c, self.diag * c, self.upper * c)

    def to_dense(self) -> np.ndarray:
        n = self.n
        batch = np.broadcast_shapes(self.lower.shape, self.diag.shape, self.upper.shape)[:-1]
        out = np.zeros(batch + (n, n))
        idx = np.arange(n)
        out[..., idx, idx] = self.diag
        out[..., idx[1:], idx[:-1]] = self.lower[..., 1:]
        out[..., idx[:-1], idx[1:]] = self.upper[..., :-1]
        return out

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.shared:
            return self._solve_shared(rhs)
        return self._solve_batched(rhs)

    def _solve_shared(self, rhs):
        n = self.n
        ab = np.zeros((3, n))
        ab[0, 1:] = self.upper[:-1]
        ab[1] = self.diag
        ab[2, :-1] = self.lower[1:]
        flat = rhs.reshape(-1, n).T
        out = solve_banded((1, 1), ab, flat, check_finite=False)
        return out.T.reshape(rhs.shape)

    def _solve_batched(self, rhs):
        # Thomas algorithm vectorised over the batch; axis moved to the front
        # so each sweep touches contiguous memory.
        shape = np.broadcast_shapes(self.lower.shape, self.diag.shape, self.upper.shape, rhs.shape)
        a = np.moveaxis(np.broadcast_to(self.lower, shape), -1, 0)
        b = np.moveaxis(np.broadcast_to(self.diag, shape), -1, 0)
        c = np.moveaxis(np.broadcast_to(self.upper, shape), -1, 0)
        d = np.moveaxis(np.broadcast_to(rhs, shape), -1, 0)
        n = b.shape[0]
        cp = np.empty(b.shape)
        dp = np.empty(b.shape)
        cp[0] = c[0] / b[0]
        dp[0] = d[0] / b[0]
        for i in range(1, n):
            denom = b[i] - a[i] * cp[i - 1]
            cp[i] = c[i] / denom
            dp[i] = (d[i] - a[i] * dp[i - 1]) / denom
        x = np.empty(b.shape)
        x[-1] = dp[-1]
        for i in range(n - 2, -1, -1):
            x[i] = dp[i] - cp[i] * x[i + 1]
        return np.moveaxis(x, 0, -1)


def solve_operator(op, rhs: np.ndarray) -> np.ndarray:
    """Solve ``op @ x = rhs`` for a Tridiag or a (batched) dense matrix."""
    if isinstance(op, Tridiag):
        return op.solve(rhs)
    if op.ndim == 2:
        flat = rhs.reshape(-1, rhs.shape[-1]).T
        return np.linalg.solve(op, flat).T.reshape(rhs.shape)
    return np.linalg.solve(op, rhs[..., None])[..., 0]


def apply_operator(op, x: np.ndarray) -> np.ndarray:
    if isinstance(op, Tridiag):
        return op.matvec(x)
    return np.einsum("...ij,...j->...i", op, x)


def combine(a, alpha: float, b, beta: float):
    """Return ``alpha * a + beta * b`` for Tridiag/dense operands."""
    if isinstance(a, Tridiag) and isinstance(b, Tridiag):
        return a.scale(alpha) + b.scale(beta)
    da = a.to_dense() if isinstance(a, Tridiag) else a
    db = b.to_dense() if isinstance(b, Tridiag) else b
    return alpha * da + beta * db


class GalerkinSpace:
    """P1 finite elements on a uniform grid of (0, 1), Dirichlet boundary.

    Parameters
    ----------
    n_dof : int
        Number of interior nodes; the mesh width is ``1 / (n_dof + 1)``.
    """

    kind = "galerkin"

    def __init__(self, n_dof: int):
        if int(n_dof) < 1:
            raise ValueError("n_dof must be >= 1")
        self.n_dof = int(n_dof)
        self.h = 1.0 / (self.n_dof + 1)
        self.nodes = self.h * np.arange(1, self.n_dof + 1)
        n, h = self.n_dof, self.h
        self.mass = Tridiag(np.full(n, h / 6.0), np.full(n, 4.0 * h / 6.0), np.full(n, h / 6.0))
        self.stiffness = Tridiag(np.full(n, -1.0 / h), np.full(n, 2.0 / h), np.full(n, -1.0 / h))
        # construction-time SPD check of the mass matrix
        cho_factor(self.mass.to_dense())
        self.quad_points = (np.arange(n + 1)[:, None] + _GAUSS_S[None, :]) * h
        self.quad_weights = h * _GAUSS_W

    def __repr__(self) -> str:
        return f"GalerkinSpace(n_dof={self.n_dof})"

    @cached_property
    def gradient_operator(self) -> np.ndarray:
        """Dense (n_dof + 1, n_dof) map from nodal values to cell gradients."""
        n = self.n_dof
        g = np.zeros((n + 1, n))
        idx = np.arange(n)
        g[idx, idx] = 1.0 / self.h
        g[idx + 1, idx] = -1.0 / self.h
        return g

    def pad(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        pad_width = [(0, 0)] * (v.ndim - 1) + [(1, 1)]
        return np.pad(v, pad_width)

    def cell_gradients(self, v: np.ndarray) -> np.ndarray:
        vp = self.pad(v)
        return np.diff(vp, axis=-1) / self.h

    def quad_values(self, v: np.ndarray) -> np.ndarray:
        """Values at the Gauss points, shape (..., n_dof + 1, 3)."""
        vp = self.pad(v)
        left = vp[..., :-1, None]
        right = vp[..., 1:, None]
        return left * (1.0 - _GAUSS_S) + right * _GAUSS_S

    def integrate(self, fq: np.ndarray) -> np.ndarray:
        """Integral over (0, 1) of a function given at the Gauss points."""
        return np.einsum("...cq,q->...", fq, self.quad_weights)

    def assemble_load(self, fq: np.ndarray) -> np.ndarray:
        """Load vector ``int f psi_j`` from Gauss-point values of ``f``."""
        w = self.quad_weights
        right_part = np.einsum("...cq,q->...c", fq, w * _GAUSS_S)  # test = right node
        left_part = np.einsum("...cq,q->...c", fq, w * (1.0 - _GAUSS_S))  # test = left node
        return right_part[..., :-1] + left_part[..., 1:]

    def assemble_cell_derivative_load(self, sigma: np.ndarray) -> np.ndarray:
        """Load vector ``int sigma psi_j'`` for a cellwise-constant ``sigma``."""
        return sigma[..., :-1] - sigma[..., 1:]

    def assemble_matrix(self, mass_q=None, adv_q=None, adv_t_q=None, diff_c=None) -> Tridiag:
        """Assemble a tridiagonal bilinear form (test j, trial k).

        ``mass_q``   coefficient of psi_k psi_j at Gauss points
        ``adv_q``    coefficient of psi_k' psi_j at Gauss points
        ``adv_t_q``  coefficient of psi_k psi_j' at Gauss points
        ``diff_c``   cellwise coefficient of psi_k' psi_j'
        """
        h = self.h
        w = self.quad_weights
        phi = (1.0 - _GAUSS_S, _GAUSS_S)  # local shape values: left, right
        dphi = (-1.0 / h, 1.0 / h)
        batch = ()
        for arr in (mass_q, adv_q, adv_t_q):
            if arr is not None:
                batch = np.broadcast_shapes(batch, np.shape(arr)[:-2])
        if diff_c is not None:
            batch = np.broadcast_shapes(batch, np.shape(diff_c)[:-1])
        local = np.zeros(batch + (self.n_dof + 1, 2, 2))
        for a in range(2):  # test
            for b in range(2):  # trial
                if mass_q is not None:
                    local[..., a, b] += np.einsum("...cq,q->...c", mass_q, w * phi[a] * phi[b])
                if adv_q is not None:
                    local[..., a, b] += np.einsum("...cq,q->...c", adv_q, w * phi[a]) * dphi[b]
                if adv_t_q is not None:
                    local[..., a, b] += np.einsum("...cq,q->...c", adv_t_q, w * phi[b]) * dphi[a]
                if diff_c is not None:
                    local[..., a, b] += diff_c * h * dphi[a] * dphi[b]
        n = self.n_dof
        diag = local[..., :n, 1, 1] + local[..., 1:, 0, 0]
        lower = np.zeros(batch + (n,))
        upper = np.zeros(batch + (n,))
        lower[..., 1:] = local[..., 1:n, 1, 0]
        upper[..., :-1] = local[..., 1:n, 0, 1]
        return Tridiag(lower, diag, upper)

    def weighted_mass(self, weight) -> Tridiag:
        """Matrix of ``int w psi_j psi_k`` for a callable weight ``w(x)``."""
        return self.assemble_matrix(mass_q=weight(self.quad_points))

    @cached_property
    def dirichlet_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``K phi = lam M phi`` in increasing order."""
        k = np.arange(1, self.n_dof + 1)
        c = np.cos(k * np.pi * self.h)
        kappa = (2.0 - 2.0 * c) / self.h
        mu = self.h * (4.0 + 2.0 * c) / 6.0
        return kappa / mu

    def sine_modes(self, m: int) -> np.ndarray:
        """First ``m`` discrete Dirichlet eigenvectors, L2-orthonormal, shape (m, n_dof)."""
        if m > self.n_dof:
            raise ValueError(f"cannot build {m} modes on {self.n_dof} nodes")
        k = np.arange(1, m + 1)[:, None]
        modes = np.sin(k * np.pi * self.nodes[None, :])
        norms = np.sqrt(np.einsum("kj,kj->k", modes, self.mass.matvec(modes)))
        return modes / norms[:, None]


class EuclideanSpace:
    """Finite-dimensional R^d with the Euclidean inner product.

    Used by the scalar and diagonal linear models where the state is not a
    field on the unit interval.
    """

    kind = "euclidean"

    def __init__(self, n_dof: int):
        if int(n_dof) < 1:
            raise ValueError("n_dof must be >= 1")
        self.n_dof = int(n_dof)
        self.mass = Tridiag.identity(self.n_dof)

    def __repr__(self) -> str:
        return f"EuclideanSpace(n_dof={self.n_dof})"

    def weighted_mass(self, weight) -> Tridiag:
        w = np.broadcast_to(np.asarray(weight, dtype=float), (self.n_dof,))
        return Tridiag(np.zeros(self.n_dof), w.copy(), np.zeros(self.n_dof))

    def sine_modes(self, m: int) -> np.ndarray:
        if m > self.n_dof:
            raise ValueError(f"cannot build {m} modes on {self.n_dof} coordinates")
        return np.eye(self.n_dof)[:m]


# --------------------------------------------------------------------------
# Norm structures (discrete Gelfand triples)
# --------------------------------------------------------------------------


class _Triple:
    space: GalerkinSpace | EuclideanSpace
    h_gram: object

    @property
    def n_dof(self) -> int:
        return self.space.n_dof

    def embed_h(self, u: np.ndarray) -> np.ndarray:
        """Load vector of the H-element ``u`` (the map H -> V*)."""
        return apply_operator(self.h_gram, u)

    def riesz_h(self, f: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`embed_h`."""
        return solve_operator(self.h_gram, f)

    def h_inner(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sum(u * self.embed_h(v), axis=-1)

    def h_norm(self, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.h_inner(v, v), 0.0))


def _lq_dual_shift(S: np.ndarray, q: float, iters: int = 200) -> np.ndarray:
    """argmin over lam of sum_c |S_c - lam|^q, vectorised over leading axes."""
    if q == 2.0:
        return S.mean(axis=-1)
    lo = S.min(axis=-1)
    hi = S.max(axis=-1)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        d = S - mid[..., None]
        slope = np.sum(np.abs(d) ** (q - 1.0) * np.sign(d), axis=-1)
        # slope > 0 means the minimiser lies to the right of mid
        lo = np.where(slope > 0, mid, lo)
        hi = np.where(slope > 0, hi, mid)
        if np.all(hi - lo <= 1e-15 * (1.0 + np.abs(mid))):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class L2Triple(_Triple):
    """V = W_0^{1,p} inside H = L^2 inside V*."""

    space: GalerkinSpace
    p: float = 2.0

    @property
    def v_norm_kind(self) -> str:
        return f"W1p({self.p:g})"

    @property
    def h_gram(self):
        return self.space.mass

    def v_norm(self, v: np.ndarray) -> np.ndarray:
        g = self.space.cell_gradients(v)
        return (self.space.h * np.sum(np.abs(g) ** self.p, axis=-1)) ** (1.0 / self.p)

    def vstar_norm(self, f: np.ndarray) -> np.ndarray:
        # In one dimension the dual of the discrete W_0^{1,p} norm reduces to
        # min_lam || S - lam ||_{l^q_h}, S_c = sum_{j >= c} f_j (tail sums by cell).
        f = np.asarray(f, dtype=float)
        h = self.space.h
        tail = np.cumsum(f[..., ::-1], axis=-1)[..., ::-1]
        S = np.concatenate([tail, np.zeros(f.shape[:-1] + (1,))], axis=-1)
        q = self.p / (self.p - 1.0)
        lam = _lq_dual_shift(S, q)
        return (h * np.sum(np.abs(S - lam[..., None]) ** q, axis=-1)) ** (1.0 / q)


@dataclass(frozen=True, eq=False)
class HminusTriple(_Triple):
    """V = L^{q} inside H = dual of D(sqrt(-L)) inside V*, L the Dirichlet Laplacian.

    The H inner product is ``<u, (-L)^{-1} v>_{L^2}``, assembled as
    ``M K^{-1} M`` from a cached Cholesky factorisation of the stiffness matrix.
    """

    space: GalerkinSpace
    q: float = 4.0

    @property
    def v_norm_kind(self) -> str:
        return f"Lr1({self.q - 1.0:g})"

    @cached_property
    def _stiff_chol(self):
        return cho_factor(self.space.stiffness.to_dense())

    @cached_property
    def h_gram(self) -> np.ndarray:
        m = self.space.mass.to_dense()
        return m @ cho_solve(self._stiff_chol, m)

    @cached_property
    def _h_gram_chol(self):
        return cho_factor(self.h_gram)

    def riesz_h(self, f: np.ndarray) -> np.ndarray:
        flat = f.reshape(-1, f.shape[-1]).T
        return cho_solve(self._h_gram_chol, flat).T.reshape(f.shape)

    def inverse_laplacian_load(self, f: np.ndarray) -> np.ndarray:
        """``M K^{-1} f``: maps an L^2 load vector to its H-pairing load vector."""
        flat = f.reshape(-1, f.shape[-1]).T
        return self.space.mass.matvec(cho_solve(self._stiff_chol, flat).T).reshape(f.shape)

    def v_norm(self, v: np.ndarray) -> np.ndarray:
        vq = self.space.quad_values(v)
        return self.space.integrate(np.abs(vq) ** self.q) ** (1.0 / self.q)

    def vstar_norm(self, f: np.ndarray, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        """Dual norm by Newton on ``(1/q) ||w||_q^q - f.w`` (convex, tridiagonal Hessian)."""
        sp = self.space
        q = self.q
        f = np.asarray(f, dtype=float)
        shape = f.shape[:-1]
        f = f.reshape(-1, f.shape[-1])
        fnorm = np.sqrt(np.sum(f * f, axis=-1))
        w = sp.mass.solve(f)
        # optimal scaling of the L^2 Riesz representer as a starting point
        nq = self.v_norm(w) ** q
        fw = np.sum(f * w, axis=-1)
        scale = (np.abs(fw) / np.where(nq > 0, nq, 1.0)) ** (1.0 / (q - 1.0))
        w = w * scale[:, None]

        def energy(w, f):
            return self.v_norm(w) ** q / q - np.sum(f * w, axis=-1)

        active = np.flatnonzero(fnorm > 0)
        for _ in range(max_iter):
            if active.size == 0:
                break
            wa, fa = w[active], f[active]
            wq = sp.quad_values(wa)
            grad = sp.assemble_load(np.abs(wq) ** (q - 2.0) * wq) - fa
            gnorm = np.sqrt(np.sum(grad * grad, axis=-1))
            done = gnorm <= tol * fnorm[active]
            coef = (q - 1.0) * np.abs(wq) ** (q - 2.0) + 1e-14
            step = sp.assemble_matrix(mass_q=coef).solve(-grad)
            E = energy(wa, fa)
            slack = 1e-15 * (np.abs(E) + np.abs(np.sum(fa * wa, axis=-1)))
            t = np.ones(active.size)
            pending = ~done
            for _ in range(40):
                if not pending.any():
                    break
                idx = np.flatnonzero(pending)
                trial = wa[idx] + t[idx, None] * step[idx]
                ok = energy(trial, fa[idx]) <= E[idx] + slack[idx]
                wa[idx[ok]] = trial[ok]
                pending[idx[ok]] = False
                t[idx[~ok]] *= 0.5
            w[active] = wa
            # rows whose step could not be accepted are at rounding level
            active = active[~done & ~pending]
        vn = self.v_norm(w)
        out = np.sum(f * w, axis=-1) / np.where(vn > 0, vn, 1.0)
        return np.where(fnorm > 0, out, 0.0).reshape(shape)


@dataclass(frozen=True, eq=False)
class EuclideanTriple(_Triple):
    """V = H = V* = R^d with the Euclidean norm."""

    space: EuclideanSpace

    v_norm_kind = "Euclidean"

    @property
    def h_gram(self):
        return self.space.mass

    def v_norm(self, v):
        return np.sqrt(np.sum(np.asarray(v) ** 2, axis=-1))

    def vstar_norm(self, f):
        return np.sqrt(np.sum(np.asarray(f) ** 2, axis=-1))
