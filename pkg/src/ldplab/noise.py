"""Truncated cylindrical Wiener noise and the diffusion operators B.

U is truncated to its first ``m`` coordinates and identified with the
discrete Dirichlet sine modes of the state space.  Every stream is generated
from a single 64-bit seed by a counter-based generator, so any path of an
ensemble can be regenerated on its own from ``(master_seed, path_index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .galerkin import EuclideanSpace, Tridiag

__all__ = [
    "NoiseStream",
    "DiffusionSpec",
    "NoiseOperator",
    "sample_stream",
    "sample_increments",
    "derive_seed",
    "SEED_RULE",
    "apply_diffusion",
    "hs_norm",
]

SEED_RULE = "seed = SeedSequence([parent_seed, *keys]).generate_state(2, uint32) as uint64; stream = Philox(seed)"

_KEY_CODES = {"pilot": 0x7069_6C6F}


def derive_seed(parent: int, *keys) -> int:
    """Stateless child seed for ``(parent, *keys)``; keys are ints or known tags."""
    words = [int(parent) & 0xFFFF_FFFF_FFFF_FFFF]
    for k in keys:
        words.append(_KEY_CODES[k] if isinstance(k, str) else int(k))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True, eq=False)
class NoiseStream:
    """Brownian increments of an m-dimensional truncation of W."""

    m: int
    dt: float
    n_steps: int
    seed: int | None
    increments: np.ndarray = field(repr=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.n_steps, self.m):
            raise ValueError(f"increments shape {inc.shape} != ({self.n_steps}, {self.m})")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @classmethod
    def from_increments(cls, increments, dt: float, seed: int | None = None) -> "NoiseStream":
        inc = np.asarray(increments, dtype=float)
        return cls(m=inc.shape[1], dt=float(dt), n_steps=inc.shape[0], seed=seed, increments=inc)

    def header(self) -> dict:
        return {"m": self.m, "dt": self.dt, "n_steps": self.n_steps, "seed": self.seed}


def sample_stream(m: int, dt: float, n_steps: int, seed: int) -> NoiseStream:
    """I.i.d. N(0, dt) increments, bit-identical for identical arguments."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    inc = _generator(seed).standard_normal((n_steps, m)) * np.sqrt(dt)
    return NoiseStream(m=m, dt=float(dt), n_steps=int(n_steps), seed=int(seed), increments=inc)


def sample_increments(seeds: Sequence[int], m: int, dt: float, n_steps: int) -> np.ndarray:
    """Stack of per-path streams, shape (len(seeds), n_steps, m)."""
    out = np.empty((len(seeds), n_steps, m))
    sq = np.sqrt(dt)
    for i, s in enumerate(seeds):
        out[i] = _generator(s).standard_normal((n_steps, m))
    out *= sq
    return out


# --------------------------------------------------------------------------
# Diffusion
# --------------------------------------------------------------------------


def _sine_weight(k: int, amplitude: float) -> Callable[[np.ndarray], np.ndarray]:
    def w(x):
        return amplitude * k ** -2.0 * np.sin(k * np.pi * x)

    w.__name__ = f"sine_weight_{k}"
    return w


@dataclass(frozen=True)
class DiffusionSpec:
    """Declarative description of B.

    ``additive_trace_class``: ``B(v) e_k = sigma_k phi_k`` with H-orthonormal
    sine modes ``phi_k``.  ``linear_multiplicative``: ``B(v) e_k`` is the L^2
    projection of ``w_k * v``.  On a Euclidean state space weights are
    per-coordinate constants instead of functions.
    """

    kind: str
    m: int
    sigma: tuple[float, ...] = ()
    weights: tuple = ()
    label: str = ""
    check_decay: bool = True

    def __post_init__(self):
        if self.kind not in ("additive_trace_class", "linear_multiplicative"):
            raise ValueError(f"unknown diffusion kind {self.kind!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.kind == "additive_trace_class":
            sig = np.asarray(self.sigma, dtype=float)
            if sig.shape != (self.m,):
                raise ValueError("need one amplitude per noise mode")
            k = np.arange(1, self.m + 1)
            if self.check_decay and np.any(np.abs(sig) > np.abs(sig[0]) * k ** -2.0 * (1 + 1e-12) + 1e-300):
                raise ValueError("additive amplitudes must decay at least like k^-2 relative to sigma_1")
        elif len(self.weights) != self.m:
            raise ValueError("need one weight per noise mode")

    @classmethod
    def additive(cls, sigma) -> "DiffusionSpec":
        sigma = tuple(float(s) for s in np.atleast_1d(sigma))
        return cls("additive_trace_class", len(sigma), sigma=sigma, label="additive")

    @classmethod
    def additive_decaying(cls, m: int, amplitude: float) -> "DiffusionSpec":
        k = np.arange(1, m + 1)
        return cls.additive(amplitude * k ** -2.0)

    @classmethod
    def zero(cls, m: int = 1) -> "DiffusionSpec":
        return cls("additive_trace_class", m, sigma=(0.0,) * m, label="zero")

    @classmethod
    def multiplicative_sine(cls, m: int, amplitude: float = 1.0) -> "DiffusionSpec":
        ws = tuple(_sine_weight(k, amplitude) for k in range(1, m + 1))
        return cls("linear_multiplicative", m, weights=ws, label=f"multiplicative_sine(a={amplitude:g})")

    @classmethod
    def multiplicative_constant(cls, weights) -> "DiffusionSpec":
        """Per-coordinate constant weights (Euclidean state spaces)."""
        ws = tuple(np.atleast_1d(np.asarray(w, dtype=float)) for w in weights)
        return cls("linear_multiplicative", len(ws), weights=ws, label="multiplicative_constant")

    @property
    def is_zero(self) -> bool:
        return self.kind == "additive_trace_class" and not np.any(self.sigma)


class NoiseOperator:
    """A DiffusionSpec bound to a concrete norm structure."""

    def __init__(self, spec: DiffusionSpec, triple):
        self.spec = spec
        self.triple = triple
        space = triple.space
        self.m = spec.m
        n = space.n_dof
        if spec.kind == "additive_trace_class":
            modes = space.sine_modes(spec.m)
            modes = modes / triple.h_norm(modes)[:, None]
            self.columns0 = np.asarray(spec.sigma)[:, None] * modes  # (m, n)
            self._bands = None
        else:
            if isinstance(space, EuclideanSpace):
                mats = [space.weighted_mass(w) for w in spec.weights]
                self.weight_sup = np.array([np.max(np.abs(w)) for w in spec.weights])
            else:
                mats = [space.weighted_mass(w) for w in spec.weights]
                xs = np.linspace(0.0, 1.0, 4097)
                self.weight_sup = np.array([np.max(np.abs(w(xs))) for w in spec.weights])
            self._bands = (
                np.stack([t.lower for t in mats]),
                np.stack([t.diag for t in mats]),
                np.stack([t.upper for t in mats]),
            )
            self.columns0 = np.zeros((spec.m, n))
        self._mass = space.mass

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def additive(self) -> bool:
        return self.spec.kind == "additive_trace_class"

    def apply(self, v: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """``B(v) xi`` for state ``v`` (..., n) and noise coordinates ``xi`` (..., m)."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.m:
            raise ValueError(f"noise dimension {xi.shape[-1]} != m = {self.m}")
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.triple.n_dof:
            raise ValueError(f"state dimension {v.shape[-1]} != {self.triple.n_dof}")
        if self.additive:
            out = xi @ self.columns0
            return np.broadcast_to(out, np.broadcast_shapes(out.shape, v.shape)).copy()
        lo, di, up = (xi @ b for b in self._bands)
        weighted = Tridiag(lo, di, up).matvec(v)
        return self._mass.solve(weighted)

    def columns(self, v: np.ndarray) -> np.ndarray:
        """All ``B(v) e_k`` stacked, shape (..., m, n)."""
        v = np.asarray(v, dtype=float)
        if self.additive:
            return np.broadcast_to(self.columns0, v.shape[:-1] + self.columns0.shape).copy()
        lo, di, up = self._bands
        weighted = Tridiag(lo, di, up).matvec(v[..., None, :])
        return self._mass.solve(weighted)

    def affine_parts(self) -> tuple[np.ndarray, np.ndarray]:
        """``B(v) u = B0 u + sum_j u_j B1[j] v`` with B0 (n, m) and B1 (m, n, n)."""
        n = self.triple.n_dof
        b0 = self.columns0.T.copy()
        if self.additive:
            return b0, np.zeros((self.m, n, n))
        lo, di, up = self._bands
        dense = Tridiag(lo, di, up).to_dense()  # (m, n, n)
        m_dense = self._mass.to_dense()
        b1 = np.linalg.solve(m_dense[None], dense)
        return b0, b1

    def hs_norm(self, v: np.ndarray, target: str = "H") -> np.ndarray:
        cols = self.columns(v)
        if target == "H":
            sq = self.triple.h_norm(cols) ** 2
        elif target == "V":
            sq = self.triple.v_norm(cols) ** 2
        else:
            raise ValueError(f"unknown target {target!r}")
        return np.sqrt(np.sum(sq, axis=-1))

    def lipschitz_bound_h(self) -> float:
        """Upper bound on the H-Lipschitz constant of v -> B(v) in HS norm (L^2 states)."""
        if self.additive:
            return 0.0
        return float(np.max(self.weight_sup) * np.sqrt(self.m))


def apply_diffusion(model, v, xi):
    return model.diffusion.apply(v, xi)


def hs_norm(model, v, target: str = "H"):
    return model.diffusion.hs_norm(v, target)
