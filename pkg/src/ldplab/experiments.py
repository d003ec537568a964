"""Configuration-driven experiment runs with manifests and reproducible outputs.

A run reads a TOML file, validates it strictly (unknown keys are errors),
executes one experiment and writes JSON records, CSV curves and a manifest
into its output directory.  Numeric payloads depend only on the validated
config, so re-running a manifest reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path as FsPath
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .framework import SineSampler, audit_assumptions
from .lab import (
    RateConfig,
    RateTarget,
    Statistic,
    TailExperiment,
    equiv_curve,
    estimate_rate,
    estimate_tail,
    exit_curve,
    hv_energy,
    sup_h_distance,
)
from .models import ModelRejected, make_model
from .noise import SEED_RULE, DiffusionSpec, derive_seed, sample_stream
from .stepper import StepperConfig, simulate

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "RunError",
    "load_config",
    "config_hash",
    "run",
    "report",
    "dumps",
]

KINDS = ("audit", "simulate", "tail", "equiv-curve", "rate", "exit-curve")


class ConfigError(ValueError):
    """Invalid configuration; ``details`` lists (location, message) pairs."""

    def __init__(self, message: str, details=()):
        super().__init__(message)
        self.details = list(details)


class RunError(RuntimeError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    id: Literal["burgers", "plaplace", "pme", "heat", "linear"] = "heat"
    params: dict[str, float | int | bool | str | list[float]] = Field(default_factory=dict)


class GridSection(_Strict):
    n_dof: int = Field(31, ge=1)
    dt: float = Field(0.01, gt=0)
    horizon: float = Field(1.0, gt=0)
    solver_tol: float = Field(1e-10, gt=0)
    max_iters: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _grid(self):
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * self.horizon:
            raise ValueError("horizon must be a positive multiple of dt")
        return self


class NoiseSection(_Strict):
    m: int = Field(16, ge=1)
    kind: Literal["multiplicative", "additive", "zero"] = "multiplicative"
    amplitude: float = 1.0
    sigma: list[float] = Field(default_factory=list)


class InitialSection(_Strict):
    kind: Literal["sine", "zero", "values"] = "sine"
    amplitude: float = 1.0
    mode: int = Field(1, ge=1)
    values: list[float] = Field(default_factory=list)


class StatisticsSection(_Strict):
    kind: Literal["equiv_sup_distance", "energy_ball_exit", "zero_drift_deviation"] = "equiv_sup_distance"
    delta: Optional[float] = Field(None, ge=0)
    big_m: list[float] = Field(default_factory=lambda: [1.0])
    p_exponent: float = Field(2.0, ge=2)
    epsilon: list[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125, 0.0625])

    @field_validator("epsilon")
    @classmethod
    def _eps(cls, v):
        if not v or any(not 0 < e <= 1 for e in v):
            raise ValueError("epsilon values must lie in (0, 1]")
        return v


class EnsembleSection(_Strict):
    n_paths: int = Field(1000, ge=1)
    master_seed: int = Field(0, ge=0)


class AuditSection(_Strict):
    n: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    amplitude: float = Field(1.0, gt=0)
    n_modes: int = Field(8, ge=1)


class RateSection(_Strict):
    y: list[float] = Field(default_factory=list)
    y_scale: float = 1.5
    match_tol: float = Field(1e-8, gt=0)
    n_intervals: int = Field(50, ge=1)
    max_iters: int = Field(500, ge=1)
    restarts: int = Field(1, ge=1)
    step_size: float = Field(0.1, gt=0)


class OutputSection(_Strict):
    directory: str = "ldplab-run"


class ExperimentConfig(_Strict):
    kind: Literal["audit", "simulate", "tail", "equiv-curve", "rate", "exit-curve"] = "audit"
    model: ModelSection = Field(default_factory=ModelSection)
    grid: GridSection = Field(default_factory=GridSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    statistics: StatisticsSection = Field(default_factory=StatisticsSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    audit: AuditSection = Field(default_factory=AuditSection)
    rate: RateSection = Field(default_factory=RateSection)
    output: OutputSection = Field(default_factory=OutputSection)


# --------------------------------------------------------------------------
# Parsing and hashing
# --------------------------------------------------------------------------


def _validation_details(err: ValidationError) -> list[tuple[str, str]]:
    return [(".".join(str(p) for p in e["loc"]), e["msg"]) for e in err.errors()]


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        details = _validation_details(err)
        raise ConfigError("invalid config: " + "; ".join(f"{k}: {m}" for k, m in details), details) from None


def load_config(path) -> ExperimentConfig:
    """Read a TOML config, or the config stored inside a run manifest (JSON)."""
    path = FsPath(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", [("file", str(path))])
    raw = path.read_bytes()
    if path.suffix == ".json":
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON at line {err.lineno}: {err.msg}", [(f"line {err.lineno}", err.msg)])
        data = data.get("config", data)
    else:
        try:
            data = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"invalid TOML: {err}", [("syntax", str(err))]) from None
    return parse_config(data)


def _canonical(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical (sorted, defaults filled) config, output location excluded."""
    data = _canonical(cfg)
    data.pop("output", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# Serialization with 17 significant digits
# --------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def _render(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_render(v, indent, level + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_render(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _render(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits and sorted keys."""
    return _render(obj, indent, 0) + "\n"


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (bool, np.bool_)):
                cells.append("true" if v else "false")
            elif isinstance(v, (float, np.floating)):
                cells.append(_fmt_float(float(v)).strip('"'))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Building objects from a config
# --------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig):
    params = dict(cfg.model.params)
    if cfg.model.id == "linear":
        if "sigma" in params and isinstance(params["sigma"], list):
            params["sigma"] = np.asarray(params["sigma"], dtype=float)
        factory_kwargs = params
    else:
        n_dof = cfg.grid.n_dof
        m = min(cfg.noise.m, n_dof)
        if cfg.noise.kind == "zero":
            spec = DiffusionSpec.zero(m)
        elif cfg.noise.kind == "additive":
            spec = DiffusionSpec.additive(cfg.noise.sigma) if cfg.noise.sigma else \
                DiffusionSpec.additive_decaying(m, cfg.noise.amplitude)
        else:
            spec = DiffusionSpec.multiplicative_sine(m, cfg.noise.amplitude)
        factory_kwargs = dict(params, diffusion=spec, n_dof=n_dof)
    try:
        return make_model(cfg.model.id, **factory_kwargs)
    except TypeError as err:
        raise ConfigError(f"model.params: {err}", [("model.params", str(err))]) from None


def build_x0(cfg: ExperimentConfig, model) -> np.ndarray:
    ini = cfg.initial
    n = model.n_dof
    if ini.kind == "zero":
        return np.zeros(n)
    if ini.kind == "values":
        if len(ini.values) != n:
            raise ConfigError(f"initial.values needs {n} entries", [("initial.values", "length mismatch")])
        return np.asarray(ini.values, dtype=float)
    if getattr(model.space, "kind", "") == "euclidean":
        return np.full(n, ini.amplitude)
    return ini.amplitude * np.sin(ini.mode * np.pi * model.space.nodes)


def _stepper_cfg(cfg: ExperimentConfig) -> StepperConfig:
    return StepperConfig(dt=cfg.grid.dt, solver_tol=cfg.grid.solver_tol, max_iters=cfg.grid.max_iters)


# --------------------------------------------------------------------------
# Experiment kinds
# --------------------------------------------------------------------------


def _run_audit(cfg, model, x0):
    sampler = SineSampler(n_modes=cfg.audit.n_modes, amplitude=cfg.audit.amplitude)
    rep = audit_assumptions(model, sampler, cfg.audit.n, seed=cfg.audit.seed)
    rows = [(r["condition_id"], r["n_samples"], r["n_violations"], r["fitted_constant"], r["worst_margin"])
            for r in rep.records()]
    files = {
        "audit.json": dumps(rep.to_dict()),
        "audit.csv": _csv(["condition_id", "n_samples", "n_violations", "fitted_constant", "worst_margin"], rows),
    }
    return files, {"audit_seed": cfg.audit.seed}


def _run_simulate(cfg, model, x0):
    eps = cfg.statistics.epsilon[0]
    scfg = _stepper_cfg(cfg)
    n_steps = round(cfg.grid.horizon / cfg.grid.dt)
    seed = derive_seed(cfg.ensemble.master_seed, 0)
    stream = sample_stream(model.diffusion.m, cfg.grid.dt, n_steps, seed)
    full = simulate(model, x0, eps, cfg.grid.horizon, scfg, stream, "full")
    zero = simulate(model, x0, eps, cfg.grid.horizon, scfg, stream, "zero_drift")
    summary = {
        "epsilon": eps,
        "stream": stream.header(),
        "master_seed": cfg.ensemble.master_seed,
        "seed_rule": SEED_RULE,
        "sup_h_distance": sup_h_distance(full, zero, model),
        "hv_energy": hv_energy(full, eps, cfg.statistics.p_exponent, model),
        "final_h_norm": float(model.triple.h_norm(full.states[-1])),
    }
    files = {
        "simulate.json": dumps(summary),
        "path_full.bin": full.to_bytes(),
        "path_full.csv": full.to_csv(),
        "path_zero_drift.bin": zero.to_bytes(),
        "path_zero_drift.csv": zero.to_csv(),
    }
    return files, {"path_seed": seed}


def _threshold(cfg):
    st = cfg.statistics
    if st.kind == "energy_ball_exit":
        return st.big_m[0]
    if st.delta is None:
        raise ConfigError("statistics.delta is required for this experiment", [("statistics.delta", "missing")])
    return st.delta


def _run_tail(cfg, model, x0):
    st = cfg.statistics
    stat = Statistic(st.kind, _threshold(cfg), st.p_exponent)
    records, rows, seeds = [], [], {}
    for i, eps in enumerate(st.epsilon):
        seed = derive_seed(cfg.ensemble.master_seed, i + 1)
        seeds[repr(eps)] = seed
        exp = TailExperiment(stat, eps, cfg.ensemble.n_paths, x0, _stepper_cfg(cfg), cfg.grid.horizon)
        est = estimate_tail(model, exp, seed)
        records.append(est.to_dict())
        rows.append((eps, est.log_scaled, est.ci_95[0], est.ci_95[1], est.is_bound))
    files = {
        "tail.json": dumps({"records": records, "master_seed": cfg.ensemble.master_seed, "seed_rule": SEED_RULE}),
        "curve.csv": _csv(["epsilon", "log_scaled", "ci_lo", "ci_hi", "is_bound"], rows),
    }
    return files, {"per_epsilon_seeds": seeds}


def _run_equiv(cfg, model, x0):
    st = cfg.statistics
    eps = sorted(set(st.epsilon), reverse=True)
    curve = equiv_curve(model, st.delta, eps, cfg.ensemble.n_paths, x0, _stepper_cfg(cfg),
                        cfg.ensemble.master_seed, cfg.grid.horizon)
    seeds = {repr(e): derive_seed(cfg.ensemble.master_seed, i + 1) for i, e in enumerate(eps)}
    payload = curve.to_dict()
    payload["seed_rule"] = SEED_RULE
    files = {
        "equiv_curve.json": dumps(payload),
        "curve.csv": _csv(["epsilon", "log_scaled", "ci_lo", "ci_hi", "is_bound"], curve.csv_rows()),
    }
    return files, {"per_epsilon_seeds": seeds, "pilot_seed": derive_seed(cfg.ensemble.master_seed, "pilot")}


def _run_exit(cfg, model, x0):
    st = cfg.statistics
    eps = st.epsilon[0]
    seed = derive_seed(cfg.ensemble.master_seed, 1)
    ests = exit_curve(model, sorted(st.big_m), eps, cfg.ensemble.n_paths, x0, _stepper_cfg(cfg), seed,
                      cfg.grid.horizon, st.p_exponent)
    rows = [(e.threshold, e.log_scaled, e.ci_95[0], e.ci_95[1], e.is_bound, e.n_hits) for e in ests]
    files = {
        "exit_curve.json": dumps({"records": [e.to_dict() for e in ests], "seed_rule": SEED_RULE,
                                  "master_seed": cfg.ensemble.master_seed}),
        "curve.csv": _csv(["big_m", "log_scaled", "ci_lo", "ci_hi", "is_bound", "n_hits"], rows),
    }
    return files, {"per_epsilon_seeds": {repr(eps): seed}}


def _run_rate(cfg, model, x0):
    rs = cfg.rate
    y = np.asarray(rs.y, dtype=float) if rs.y else rs.y_scale * x0
    if y.shape != x0.shape:
        raise ConfigError(f"rate.y needs {x0.size} entries", [("rate.y", "length mismatch")])
    target = RateTarget(y, rs.match_tol, cfg.grid.horizon)
    opt = RateConfig(n_intervals=rs.n_intervals, max_iters=rs.max_iters, restarts=rs.restarts,
                     step_size=rs.step_size, seed=cfg.ensemble.master_seed)
    est = estimate_rate(model, x0, target, opt)
    return {"rate.json": dumps(est.to_dict())}, {"restart_seed": cfg.ensemble.master_seed}


_RUNNERS = {
    "audit": _run_audit,
    "simulate": _run_simulate,
    "tail": _run_tail,
    "equiv-curve": _run_equiv,
    "exit-curve": _run_exit,
    "rate": _run_rate,
}


# --------------------------------------------------------------------------
# Run / report
# --------------------------------------------------------------------------


class _DirLock:
    def __init__(self, directory: FsPath):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunError(f"output directory is locked by another run: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def run(config, output_dir=None) -> dict:
    """Execute one experiment; returns the manifest written to ``<output>/manifest.json``."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = FsPath(output_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    with _DirLock(out):
        start = time.perf_counter()
        try:
            model = build_model(cfg)
        except ModelRejected as err:
            raise ConfigError(f"model rejected: {err}", [("model", str(err))]) from None
        x0 = build_x0(cfg, model)
        files, seeds = _RUNNERS[cfg.kind](cfg, model, x0)
        listing = []
        for name in sorted(files):
            data = files[name]
            data = data.encode() if isinstance(data, str) else data
            (out / name).write_bytes(data)
            listing.append({"name": name, "sha256": _sha256(data), "bytes": len(data)})
        manifest = {
            "config_hash": config_hash(cfg),
            "config": _canonical(cfg),
            "kind": cfg.kind,
            "tool_version": __version__,
            "wall_time_s": time.perf_counter() - start,
            "master_seed": cfg.ensemble.master_seed,
            "seed_rule": SEED_RULE,
            "seeds": seeds,
            "model": model.describe(),
            "files": listing,
        }
        (out / "manifest.json").write_text(dumps(manifest))
    return manifest


def _read_manifest(run_dir: FsPath) -> dict:
    path = run_dir / "manifest.json"
    if not path.is_file():
        raise RunError(f"no manifest in {run_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise RunError(f"corrupt manifest: {err}") from None
    for key in ("kind", "files", "config_hash"):
        if key not in manifest:
            raise RunError(f"corrupt manifest: missing {key!r}")
    for entry in manifest["files"]:
        f = run_dir / entry["name"]
        if not f.is_file() or _sha256(f.read_bytes()) != entry["sha256"]:
            raise RunError(f"artifact {entry['name']} missing or modified")
    return manifest


def _table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[_short(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def report(run_dir) -> tuple[str, str]:
    """Human-readable table and plot-ready CSV for a finished run (no recomputation)."""
    run_dir = FsPath(run_dir)
    manifest = _read_manifest(run_dir)
    kind = manifest["kind"]
    if kind == "audit":
        data = json.loads((run_dir / "audit.json").read_text())
        header = ["condition", "n_samples", "violations", "fitted_constant", "worst_margin", "pass"]
        rows = [(c["condition_id"], c["n_samples"], c["n_violations"], _num(c["fitted_constant"]),
                 _num(c["worst_margin"]), c["n_violations"] == 0) for c in data["conditions"]]
        title = f"audit of {data['model_id']} (n={data['n_samples']}, seed={data['seed']})"
    elif kind in ("tail", "equiv-curve", "exit-curve"):
        name = {"tail": "tail.json", "equiv-curve": "equiv_curve.json", "exit-curve": "exit_curve.json"}[kind]
        data = json.loads((run_dir / name).read_text())
        recs = data.get("records", data.get("rows", []))
        key = "threshold" if kind == "exit-curve" else "epsilon"
        header = ["big_m", "epsilon", "n_hits", "n_paths", "log_scaled", "ci_lo",
                  "ci_hi", "bound"]
        rows = []
        for r in recs:
            if "error" in r:
                rows.append((_num(r["epsilon"]), _num(r["epsilon"]), "-", "-", "failed", "-", "-", "-"))
                continue
            rows.append((_num(r[key]), _num(r["epsilon"]), r["n_hits"], r["n_paths"], _num(r["log_scaled"]),
                         _num(r["ci_95"][0]), _num(r["ci_95"][1]), r["is_bound"]))
        title = f"{kind} ({manifest['model']['model_id']})"
        if kind == "equiv-curve":
            title += f", delta={_short(_num(data['delta']))}, trend={data['trend']} consecutive decreases"
        if kind != "exit-curve":
            header = header[1:]
            rows = [r[1:] for r in rows]
    elif kind == "rate":
        data = json.loads((run_dir / "rate.json").read_text())
        header = ["i_value", "terminal_gap", "converged", "status", "iterations"]
        rows = [(_num(data["i_value"]), _num(data["terminal_gap"]), data["converged"], data["status"],
                 data["iterations"])]
        title = "rate estimate (upper bound)"
    else:
        data = json.loads((run_dir / "simulate.json").read_text())
        header = ["epsilon", "sup_h_distance", "hv_energy", "final_h_norm"]
        rows = [(_num(data["epsilon"]), _num(data["sup_h_distance"]), _num(data["hv_energy"]),
                 _num(data["final_h_norm"]))]
        title = "simulation"
    text = title + "\n" + _table(header, rows) + "\n"
    return text, _csv(header, rows)


def _num(v):
    if isinstance(v, str):
        return float(v)
    return v
