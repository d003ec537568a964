"""Drift-implicit, noise-explicit Euler-Maruyama stepping and the path container.

One step solves ``X' = X + s dt R_H A(t, X') + noise`` for X', where R_H maps
a load vector to its H-representative.  The nonlinear system is solved by
damped Newton with a fixed-point relaxation fallback.  Every routine accepts
a batch of states (leading axis) so that an ensemble advances in lockstep.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .galerkin import Tridiag, apply_operator, combine, solve_operator

__all__ = [
    "StepperConfig",
    "NonconvergenceError",
    "BlowUpError",
    "Path",
    "solve_monotone",
    "implicit_step",
    "advance",
    "simulate",
    "BLOWUP_THRESHOLD",
]

BLOWUP_THRESHOLD = 1e8
SCHEME = "drift-implicit-euler-maruyama"
_PATH_MAGIC = b"LDPPATH1"


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    solver_tol: float = 1e-10
    max_iters: int = 50
    max_halvings: int = 4
    scheme: str = SCHEME

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.solver_tol > 0:
            raise ValueError("solver_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.scheme != SCHEME:
            raise ValueError(f"unsupported scheme {self.scheme!r}")


class NonconvergenceError(RuntimeError):
    def __init__(self, message, residual=np.nan, history=(), step_index=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history)
        self.step_index = step_index


class BlowUpError(RuntimeError):
    def __init__(self, message, step_index, last_state):
        super().__init__(message)
        self.step_index = step_index
        self.last_state = last_state


# --------------------------------------------------------------------------
# Path
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Path:
    """States on a time grid plus the metadata needed to regenerate them."""

    times: np.ndarray
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or states.ndim != 2 or states.shape[0] != times.shape[0]:
            raise ValueError("need times (K,) and states (K, n)")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("times must start at 0 and increase")
        if not np.all(np.isfinite(states)):
            raise ValueError("path states must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.times.shape[0]

    def to_bytes(self) -> bytes:
        """Header length (uint32 LE), JSON header, then times and states as LE float64."""
        header = dict(self.meta)
        header.update({"n_times": len(self), "n_dof": int(self.states.shape[1])})
        hb = json.dumps(header, sort_keys=True).encode()
        payload = self.times.astype("<f8").tobytes() + self.states.astype("<f8").tobytes()
        return _PATH_MAGIC + struct.pack("<I", len(hb)) + hb + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Path":
        if data[:8] != _PATH_MAGIC:
            raise ValueError("not a path record")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12 : 12 + hlen])
        k, n = header.pop("n_times"), header.pop("n_dof")
        body = np.frombuffer(data[12 + hlen :], dtype="<f8")
        if body.size != k * (n + 1):
            raise ValueError("truncated path record")
        return cls(body[:k].copy(), body[k:].reshape(k, n).copy(), header)

    def to_csv(self) -> str:
        buf = io.StringIO()
        n = self.states.shape[1]
        buf.write(",".join(["time"] + [f"x{j}" for j in range(n)]) + "\n")
        for t, row in zip(self.times, self.states):
            buf.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
        return buf.getvalue()


# --------------------------------------------------------------------------
# Nonlinear solver
# --------------------------------------------------------------------------


def _fd_newton(residual_map):
    def solve(x, r):
        n = x.shape[-1]
        h = 1e-7 * (1.0 + np.abs(x))
        jac = np.empty(x.shape + (n,))
        for k in range(n):
            e = np.zeros_like(x)
            e[..., k] = h[..., k]
            jac[..., :, k] = (residual_map(x + e) - r) / h[..., k : k + 1]
        return -np.linalg.solve(jac, r[..., None])[..., 0]

    return solve


def solve_monotone(residual_map, x0, cfg: StepperConfig, *, newton_direction=None, norm=None,
                   return_info: bool = False, raise_on_failure: bool = True):
    """Find x with ``norm(residual_map(x)) <= cfg.solver_tol``.

    Damped Newton (backtracking until the residual norm decreases), falling
    back to relaxation ``x - w R(x)`` when no Newton step is accepted.  Works
    on a batch; each row is accepted or rejected on its own.  Returns
    ``(x, converged, history)`` with ``return_info``.
    """
    x = np.array(x0, dtype=float, copy=True)
    scalar = x.ndim == 0
    if scalar:
        x = x.reshape(1)
    norm = norm or (lambda r: np.sqrt(np.sum(r * r, axis=-1)))
    direction = newton_direction or _fd_newton(residual_map)
    r = residual_map(x)
    rn = np.asarray(norm(r), dtype=float)
    history = [float(np.max(rn))]
    failed = ~np.isfinite(rn)
    for _ in range(cfg.max_iters):
        active = (rn > cfg.solver_tol) & ~failed
        if not active.any():
            break
        with np.errstate(all="ignore"):
            delta = direction(x, r)
        accepted = ~active
        x_new, r_new, rn_new = x.copy(), r.copy(), rn.copy()
        lam = 1.0
        for _ in range(12):
            trial = np.where(accepted[..., None] if x.ndim > 1 else accepted, x, x + lam * delta)
            with np.errstate(all="ignore"):
                rt = residual_map(trial)
                rtn = np.asarray(norm(rt), dtype=float)
            ok = ~accepted & np.isfinite(rtn) & (rtn < rn)
            if ok.any():
                x_new[ok], r_new[ok], rn_new[ok] = trial[ok], rt[ok], rtn[ok]
                accepted |= ok
            if accepted.all():
                break
            lam *= 0.5
        for w in (0.5, 0.1, 0.01):
            if accepted.all():
                break
            trial = np.where(accepted[..., None] if x.ndim > 1 else accepted, x, x - w * r)
            with np.errstate(all="ignore"):
                rt = residual_map(trial)
                rtn = np.asarray(norm(rt), dtype=float)
            ok = ~accepted & np.isfinite(rtn) & (rtn < rn)
            if ok.any():
                x_new[ok], r_new[ok], rn_new[ok] = trial[ok], rt[ok], rtn[ok]
                accepted |= ok
        failed |= ~accepted
        x, r, rn = x_new, r_new, rn_new
        history.append(float(np.max(rn)))
    converged = rn <= cfg.solver_tol
    if raise_on_failure and not converged.all():
        raise NonconvergenceError(
            f"solver did not reach tol {cfg.solver_tol:g}; residual {float(np.max(rn)):.3e}",
            residual=float(np.max(rn)),
            history=history,
        )
    if scalar:
        x = x.reshape(())
    if return_info:
        return x, converged, history
    return x


# --------------------------------------------------------------------------
# Implicit step
# --------------------------------------------------------------------------


def _step_batch(model, t, x, drift_scale, noise_term, cfg):
    """One implicit step on a batch; returns (x_new, converged mask)."""
    b = x + noise_term
    if drift_scale == 0.0:
        return b, np.ones(x.shape[:-1], dtype=bool)
    tri = model.triple
    gram = tri.h_gram
    drift = model.drift
    sdt = drift_scale * cfg.dt

    def residual(y):
        return (y - b) - sdt * tri.riesz_h(drift(t, y))

    def direction(y, r):
        jac = drift.jacobian(t, y)
        op = combine(gram, 1.0, jac, -sdt)
        return -solve_operator(op, apply_operator(gram, r))

    y, ok, _ = solve_monotone(residual, b, cfg, newton_direction=direction, norm=tri.h_norm,
                              return_info=True, raise_on_failure=False)
    return y, ok


def implicit_step(model, t: float, x, drift_scale: float, noise_term, cfg: StepperConfig):
    """Solve ``y = x + drift_scale dt R_H A(t, y) + noise_term`` to ``cfg.solver_tol`` in H."""
    if drift_scale < 0:
        raise ValueError("drift_scale must be >= 0")
    x = np.asarray(x, dtype=float)
    noise_term = np.asarray(noise_term, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    y, ok = _step_batch(model, t, x[None], float(drift_scale), noise_term[None], cfg)
    if not ok.all():
        raise NonconvergenceError("implicit step did not converge")
    return y[0]


def advance(model, t: float, x, drift_scale: float, noise_term, cfg: StepperConfig, depth: int = 0):
    """Implicit step with the substep policy for rows that fail to converge.

    A failed row is redone as two steps of dt/2, the first carrying the whole
    noise term, recursively up to ``cfg.max_halvings`` times.
    """
    y, ok = _step_batch(model, t, x, drift_scale, noise_term, cfg)
    if ok.all() or depth >= cfg.max_halvings:
        return y, ok
    bad = np.flatnonzero(~ok)
    half = replace(cfg, dt=0.5 * cfg.dt)
    ya, oka = advance(model, t, x[bad], drift_scale, noise_term[bad], half, depth + 1)
    yb, okb = advance(model, t + drift_scale * half.dt, ya, drift_scale, np.zeros_like(ya), half, depth + 1)
    y = y.copy()
    ok = ok.copy()
    y[bad] = yb
    ok[bad] = oka & okb
    return y, ok


def simulate(model, x0, epsilon: float, horizon: float, cfg: StepperConfig, noise, mode: str = "full") -> Path:
    """Simulate the small-time rescaled equation (``full``) or its zero-drift part.

    ``full`` uses drift scale epsilon and drift time epsilon * t_k, ``zero_drift``
    drops the drift; both apply sqrt(epsilon) to the same noise increments.
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if mode not in ("full", "zero_drift"):
        raise ValueError(f"unknown mode {mode!r}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_dof,):
        raise ValueError(f"x0 must have shape ({model.n_dof},)")
    n_steps = int(round(horizon / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("horizon must be a positive multiple of dt")
    if noise.m != model.diffusion.m:
        raise ValueError(f"noise dimension {noise.m} != model truncation {model.diffusion.m}")
    if not np.isclose(noise.dt, cfg.dt, rtol=1e-12, atol=0.0) or noise.n_steps < n_steps:
        raise ValueError("noise stream does not match the time grid")
    s = float(epsilon) if mode == "full" else 0.0
    sq = np.sqrt(epsilon)
    states = np.empty((n_steps + 1, model.n_dof))
    states[0] = x0
    x = x0[None]
    for k in range(n_steps):
        noise_term = sq * model.diffusion.apply(x, noise.increments[k][None])
        x_new, ok = advance(model, s * k * cfg.dt, x, s, noise_term, cfg)
        if not ok.all():
            raise NonconvergenceError(f"step {k} did not converge", step_index=k)
        if not np.all(np.isfinite(x_new)) or model.triple.h_norm(x_new)[0] > BLOWUP_THRESHOLD:
            raise BlowUpError(f"blow-up at step {k}", step_index=k, last_state=x[0].copy())
        x = x_new
        states[k + 1] = x[0]
    times = cfg.dt * np.arange(n_steps + 1)
    meta = {"epsilon": float(epsilon), "dt": float(cfg.dt), "seed": noise.seed, "model_id": model.model_id,
            "mode": mode}
    return Path(times, states, meta)
