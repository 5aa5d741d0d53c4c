"""Experiment configuration: a flat `key = value` text format with `#`
comments and kind-scoped sections.

A config file holds global keys plus optional `[kind]` sections whose keys
apply only when that experiment kind runs:

    # common settings
    beta = 0.5
    n_scale = 2000
    seed = 11

    [duality]
    phi_height = 0.5
    replicas = 400

Validation collects every violation (unknown keys, missing required keys,
domain errors such as beta outside (0,1) or the branch_rate*dt cap) and
reports them together.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

__all__ = ["ExperimentConfig", "load_config", "parse_config_text", "config_hash", "KINDS"]

KINDS = (
    "simulate",
    "duality",
    "tanaka",
    "moments",
    "jumps",
    "timechange",
    "stabletails",
    "criterion",
    "holder",
    "unbounded2d",
)

_DT_CAP = 0.1


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    kind: str = "simulate"
    # model
    beta: float = 0.5
    n_scale: int = 1000
    dt: float | None = None  # defaults to the branch_rate*dt cap, fitted to t_end
    t_end: float = 0.5
    dim: int = 1
    particle_cap: int = 10_000_000
    snapshot_stride: int = 1
    initial_measure: str | None = None  # measure file path; default is delta_0
    # orchestration
    replicas: int = 100
    replica_start: int = 0
    seed: int = 0
    workers: int = 1
    out: str = "out"
    save_paths: str = "first"  # none | first | all
    max_retries: int = 3
    # analysis
    lam: float = 1.0
    lam_alt: float = 2.0
    x_panel: tuple[float, ...] = field(default_factory=tuple)  # min max count
    x_eval: tuple[float, ...] = (0.25, 0.5)
    bandwidth: float = 0.1
    q_moment: float = 1.2
    distances: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    pair_centers: tuple[float, ...] = (-0.5, -0.25, 0.0, 0.25, 0.5)
    theta_grid: tuple[float, ...] = (0.5, 1.0, 2.0)
    x1: float = -0.1
    x2: float = 0.1
    jump_units: tuple[float, ...] = (40.0, 400.0, 6.0)  # min, max lattice units, count
    # duality solver
    phi_a: float = -1.0
    phi_b: float = 1.0
    phi_height: float = 0.5
    phi_ramp: float = 0.25
    solver_nx: int = 401
    solver_nt: int = 100
    solver_x_min: float = -10.0
    solver_x_max: float = 10.0
    # stable tails
    path_steps: int = 256
    inf_x_values: tuple[float, ...] = (1.5, 2.0, 2.5, 3.0, 3.5)
    # criterion series
    gamma: float = 0.2
    q_criterion: float = 1.4
    k_window: float = 1.0
    c_free: float = 1.0
    n_max: int = 64
    r_grid: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)
    # holder
    holder_input: str | None = None  # CSV of field values; else synthetic
    holder_synthetic: str = "brownian"  # linear | sqrt_cusp | brownian
    holder_lags: tuple[float, ...] = (4.0, 64.0)
    # unbounded2d
    resolutions: tuple[float, ...] = (0.2, 0.1, 0.05)
    window: tuple[float, ...] = (-1.5, 1.5)

    def branch_rate(self) -> float:
        return (1.0 + self.beta) * self.n_scale**self.beta

    def effective_dt(self) -> float:
        if self.dt is not None:
            return self.dt
        cap = _DT_CAP / self.branch_rate()
        if self.t_end <= 0:
            return cap
        n_steps = max(1, math.ceil(self.t_end / cap - 1e-9))
        return self.t_end / n_steps

    def panel_grid(self):
        import numpy as np

        if len(self.x_panel) == 3:
            lo, hi, count = self.x_panel
            return np.linspace(lo, hi, int(count))
        return np.linspace(-1.0, 1.0, 41)

    def validate(self) -> list[str]:
        errs = []
        if self.kind not in KINDS:
            errs.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not (0.0 < self.beta < 1.0):
            errs.append(f"beta must lie in the open interval (0, 1), got {self.beta}")
        if self.n_scale < 1:
            errs.append(f"n_scale must be >= 1, got {self.n_scale}")
        if self.t_end < 0:
            errs.append(f"t_end must be >= 0, got {self.t_end}")
        if self.dim not in (1, 2):
            errs.append(f"dim must be 1 or 2, got {self.dim}")
        if self.replicas < 1:
            errs.append(f"replicas must be >= 1, got {self.replicas}")
        if self.replica_start < 0:
            errs.append(f"replica_start must be >= 0, got {self.replica_start}")
        if self.workers < 1:
            errs.append(f"workers must be >= 1, got {self.workers}")
        if self.save_paths not in ("none", "first", "all"):
            errs.append(f"save_paths must be none|first|all, got {self.save_paths!r}")
        if 0.0 < self.beta < 1.0 and self.dt is not None and self.dt > 0:
            rate_dt = self.branch_rate() * self.dt
            if rate_dt > _DT_CAP * (1 + 1e-9):
                errs.append(
                    f"branch_rate*dt = {rate_dt:.6g} exceeds the cap {_DT_CAP} "
                    f"(branch_rate = {self.branch_rate():.6g}, dt = {self.dt:.6g})"
                )
        if self.dt is not None and self.dt <= 0:
            errs.append(f"dt must be > 0, got {self.dt}")
        if self.lam <= 0:
            errs.append(f"lam must be > 0, got {self.lam}")
        if self.bandwidth <= 0:
            errs.append(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.initial_measure is not None and not Path(self.initial_measure).exists():
            errs.append(f"initial_measure file does not exist: {self.initial_measure}")
        if self.holder_input is not None and not Path(self.holder_input).exists():
            errs.append(f"holder_input file does not exist: {self.holder_input}")
        if self.kind == "moments" and not (1.0 < self.q_moment < 1.0 + self.beta):
            errs.append(
                f"q_moment must lie in (1, 1+beta) = (1, {1 + self.beta}), got {self.q_moment}"
            )
        if self.kind == "timechange" and not self.x1 <= self.x2:
            errs.append(f"need x1 <= x2, got ({self.x1}, {self.x2})")
        if self.kind == "unbounded2d" and self.dim != 2:
            errs.append("unbounded2d requires dim = 2")
        return errs


_TUPLE_KEYS = {
    "x_panel",
    "x_eval",
    "distances",
    "pair_centers",
    "theta_grid",
    "jump_units",
    "inf_x_values",
    "r_grid",
    "holder_lags",
    "resolutions",
    "window",
}
_INT_KEYS = {
    "n_scale",
    "dim",
    "particle_cap",
    "snapshot_stride",
    "replicas",
    "replica_start",
    "seed",
    "workers",
    "max_retries",
    "solver_nx",
    "solver_nt",
    "n_max",
    "path_steps",
}
_STR_KEYS = {"kind", "initial_measure", "out", "save_paths", "holder_input", "holder_synthetic"}
_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def parse_config_text(text: str, kind: str | None = None) -> ExperimentConfig:
    """Parse the flat key=value format; `[section]` scopes keys to one kind.

    The effective config merges global keys with the section matching the
    requested kind.  All violations are collected into one ConfigError.
    """
    errs: list[str] = []
    values: dict[str, str] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in KINDS:
                errs.append(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            errs.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_NAMES and key != "lambda":
            errs.append(f"line {lineno}: unknown key {key!r}")
            continue
        if section is None or section == (kind or values.get("kind")):
            values[key] = val

    if "lambda" in values:  # accepted alias for the resolvent parameter
        values["lam"] = values.pop("lambda")
    if kind is not None:
        values["kind"] = kind

    cfg_kwargs = {}
    for key, val in values.items():
        try:
            if key in _TUPLE_KEYS:
                cfg_kwargs[key] = _parse_floats(val)
            elif key in _INT_KEYS:
                cfg_kwargs[key] = int(val)
            elif key in _STR_KEYS:
                cfg_kwargs[key] = val
            else:
                cfg_kwargs[key] = float(val)
        except ValueError:
            errs.append(f"key {key!r}: cannot parse value {val!r}")
    cfg = ExperimentConfig(**cfg_kwargs) if not errs else None
    if cfg is not None:
        errs.extend(cfg.validate())
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    """Read and validate a config file; raises ConfigError listing every
    violation, not just the first."""
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file does not exist: {path}"])
    return parse_config_text(p.read_text(), kind=kind)


def canonical_lines(cfg: ExperimentConfig) -> list[str]:
    lines = []
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        val = getattr(cfg, f.name)
        if val is None:
            continue  # None means "use the default"; re-parsing restores it
        if isinstance(val, tuple):
            rendered = " ".join(repr(float(v)) for v in val)
        elif isinstance(val, float):
            rendered = repr(val)
        else:
            rendered = str(val)
        lines.append(f"{f.name} = {rendered}")
    return lines


_HASH_EXEMPT = {"replicas", "replica_start", "out", "workers", "save_paths"}


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the scientific content of a config; reports that differ only
    in replica ranges or execution details share a hash and may be merged."""
    lines = [
        line
        for line in canonical_lines(cfg)
        if line.split(" = ")[0] not in _HASH_EXEMPT
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]
