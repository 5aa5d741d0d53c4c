"""Critical branching Brownian particle system approximating the
(1+beta)-stable super-Brownian motion.

Each particle carries mass 1/N, moves as a Brownian motion, and branches at
rate (1+beta) * N^beta into a Slack-law offspring count; the compound rate
times (f(s) - s) then rescales exactly to the branching mechanism u^(1+beta),
so N enters only through initial-mass rounding and the motion/branching
interleaving.  Branch events are logged as jumps (offspring - 1)/N at the
parent location; occupation integrals of registered functionals accumulate on
the step grid by the trapezoid rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ResourceLimitError, UsageError
from .measures import FiniteMeasure
from .rng import OffspringLaw, RngStream, make_offspring_law, sample_offspring
from .textio import fnum

__all__ = [
    "ModelParams",
    "ParticleState",
    "OccupationFunctional",
    "OccupationSeries",
    "PathRecorder",
    "dt_at_cap",
    "make_params",
    "init_particles",
    "step",
    "simulate",
    "martingale_event_sum",
    "extract_big_jumps",
    "interval_jump_max",
    "save_events",
    "load_events",
    "save_snapshots",
]

_DT_CAP = 0.1  # branch_rate * dt must not exceed this


@dataclass(frozen=True)
class ModelParams:
    beta: float
    n_scale: int  # particles per unit of initial mass; particle mass is 1/n_scale
    dt: float
    t_end: float
    dim: int = 1
    particle_cap: int = 10_000_000
    snapshot_stride: int = 1

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.n_scale < 1:
            raise ValueError(f"n_scale must be >= 1, got {self.n_scale}")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.particle_cap < 1:
            raise ValueError("particle_cap must be >= 1")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        rate_dt = self.branch_rate * self.dt
        if rate_dt > _DT_CAP * (1 + 1e-9):
            raise ValueError(
                f"branch_rate*dt = {rate_dt:.6g} exceeds the cap {_DT_CAP} "
                f"(branch_rate={self.branch_rate:.6g}, dt={self.dt:.6g})"
            )

    @property
    def branch_rate(self) -> float:
        return (1.0 + self.beta) * self.n_scale**self.beta

    @property
    def mass_per_particle(self) -> float:
        return 1.0 / self.n_scale

    @property
    def c_beta(self) -> float:
        return self.beta * (self.beta + 1.0) / math.gamma(1.0 - self.beta)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def dt_at_cap(beta: float, n_scale: int, safety: float = 1.0) -> float:
    """Largest admissible dt for the given scale (safety < 1 refines it)."""
    return _DT_CAP * safety / ((1.0 + beta) * n_scale**beta)


def make_params(
    beta: float,
    n_scale: int,
    t_end: float,
    dim: int = 1,
    dt_safety: float = 1.0,
    dt: float | None = None,
    **kwargs,
) -> ModelParams:
    """ModelParams with a dt that divides t_end exactly, at or below the
    branch_rate*dt cap (tightened by dt_safety < 1)."""
    if dt is None:
        cap = dt_at_cap(beta, n_scale, dt_safety)
        if t_end > 0:
            n_steps = max(1, math.ceil(t_end / cap - 1e-9))
            dt = t_end / n_steps
        else:
            dt = cap
    elif t_end > 0:
        n_steps = max(1, int(round(t_end / dt)))
        dt = t_end / n_steps
    return ModelParams(beta=beta, n_scale=n_scale, dt=dt, t_end=t_end, dim=dim, **kwargs)


@lru_cache(maxsize=32)
def _law_for(beta: float) -> OffspringLaw:
    return make_offspring_law(beta)


@dataclass
class ParticleState:
    time: float
    positions: np.ndarray  # (n,) in d=1, (n, 2) in d=2
    mass_per_particle: float

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def total_mass(self) -> float:
        return self.count * self.mass_per_particle

    def sorted_positions(self) -> np.ndarray:
        """Sorted copy of the (d=1) positions, memoized so several kernel
        functionals can share one sort per step."""
        cached = getattr(self, "_sorted", None)
        if cached is None:
            cached = np.sort(self.positions)
            object.__setattr__(self, "_sorted", cached)
        return cached


@dataclass
class OccupationFunctional:
    """A named functional registered for occupation accumulation.

    Either fn maps a positions array to per-particle values of shape (n,) or
    (n, width), with <X_s, f> = mass_per_particle times the particle sum, or
    state_fn computes the summed (width,) value directly (used for kernels
    with a fast prefix-sum evaluation).  checkpoint_stride controls how often
    the cumulative integral is stored; the trapezoid itself always uses every
    step.  meta carries descriptive fields (kernel kind, grid, bandwidth) so
    estimators can locate matching accumulators on a recorder.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray] | None = None
    width: int = 1
    state_fn: Callable[[ParticleState], np.ndarray] | None = None
    checkpoint_stride: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.fn is None) == (self.state_fn is None):
            raise ValueError("provide exactly one of fn / state_fn")
        if self.checkpoint_stride < 1:
            raise ValueError("checkpoint_stride must be >= 1")

    def state_value(self, state: ParticleState) -> np.ndarray:
        if state.count == 0:
            return np.zeros(self.width)
        if self.state_fn is not None:
            return np.asarray(self.state_fn(state), dtype=float)
        vals = np.asarray(self.fn(state.positions))
        if vals.ndim == 1:
            vals = vals[:, None]
        return state.mass_per_particle * vals.sum(axis=0)


@dataclass
class OccupationSeries:
    """Cumulative occupation integral of one functional at checkpoint times."""

    times: np.ndarray  # (m,)
    values: np.ndarray  # (m, width), nondecreasing for f >= 0
    meta: dict

    def at(self, t: float) -> np.ndarray:
        out = np.empty(self.values.shape[1])
        for j in range(self.values.shape[1]):
            out[j] = np.interp(t, self.times, self.values[:, j])
        return out


@dataclass
class PathRecorder:
    """Step-resolution record of one replica: masses, occupation accumulators,
    position snapshots, the full branch-event log, and the extinction time."""

    params: ModelParams
    step_times: np.ndarray
    masses: np.ndarray
    mass_occupation: np.ndarray  # cumulative trapezoid of total mass
    occupations: dict[str, OccupationSeries]
    snapshot_times: np.ndarray
    snapshots: list[np.ndarray]
    event_times: np.ndarray
    event_locations: np.ndarray
    event_offspring: np.ndarray
    event_net_mass: np.ndarray
    extinction_time: float
    final_positions: np.ndarray

    @property
    def horizon(self) -> float:
        return float(self.step_times[-1])

    def occupation_at(self, name: str, t: float) -> np.ndarray:
        """Accumulator value at time t (linear interpolation between checkpoints)."""
        self._check_time(t)
        return self.series(name).at(t)

    def series(self, name: str) -> OccupationSeries:
        if name not in self.occupations:
            raise UsageError(
                f"functional {name!r} was not registered before simulate; "
                f"registered: {sorted(self.occupations)}"
            )
        return self.occupations[name]

    def find_series(self, kind: str, **fields) -> OccupationSeries | None:
        """Locate a registered accumulator by meta kind and matching fields."""
        for series in self.occupations.values():
            m = series.meta
            if m.get("kind") != kind:
                continue
            ok = True
            for key, want in fields.items():
                have = m.get(key)
                if isinstance(want, np.ndarray) or isinstance(have, np.ndarray):
                    ok = (
                        have is not None
                        and np.shape(have) == np.shape(want)
                        and np.allclose(have, want)
                    )
                else:
                    ok = have == want
                if not ok:
                    break
            if ok:
                return series
        return None

    def total_occupation_at(self, t: float) -> float:
        """<Y_t, 1>: time integral of total mass."""
        self._check_time(t)
        return float(np.interp(t, self.step_times, self.mass_occupation))

    def state_at(self, t: float) -> np.ndarray:
        """Positions snapshot at time t (must be a recorded snapshot time)."""
        self._check_time(t)
        idx = int(np.argmin(np.abs(self.snapshot_times - t)))
        if abs(self.snapshot_times[idx] - t) > 0.500001 * self.params.dt:
            raise UsageError(
                f"no snapshot at t={t}; nearest is {self.snapshot_times[idx]}"
            )
        return self.snapshots[idx]

    def events_until(self, t: float) -> slice:
        self._check_time(t)
        hi = int(np.searchsorted(self.event_times, t, side="right"))
        return slice(0, hi)

    def _check_time(self, t: float) -> None:
        tol = 1e-9 * max(1.0, self.horizon)
        if t < -tol or t > self.horizon + tol:
            raise UsageError(f"t={t} outside the recorded horizon [0, {self.horizon}]")


def init_particles(mu: FiniteMeasure, params: ModelParams, stream: RngStream) -> ParticleState:
    """Nearest-integer(N * total_mass) particles, i.i.d. from the normalized mu.

    In d=2 the two coordinates are drawn independently from the same
    normalized one-dimensional measure (product initial condition).
    """
    if mu.total_mass <= 0:
        raise ValueError("initial measure must have positive total mass")
    n = int(round(params.n_scale * mu.total_mass))
    if params.dim == 1:
        pos = mu.sample_positions(stream.gen, n)
    else:
        pos = np.column_stack(
            [mu.sample_positions(stream.gen, n), mu.sample_positions(stream.gen, n)]
        )
    return ParticleState(time=0.0, positions=pos, mass_per_particle=params.mass_per_particle)


def step(
    state: ParticleState, params: ModelParams, stream: RngStream
) -> tuple[ParticleState, tuple[np.ndarray, np.ndarray]]:
    """Advance one time step: Gaussian displacement of variance dt per
    coordinate, then branching with probability branch_rate*dt per particle.

    Returns the new state and the step's events as (locations, offspring
    counts).  Offspring count 1 has probability zero under the Slack law, so
    every logged event changes mass.
    """
    new_time = state.time + params.dt
    n = state.count
    if n == 0:
        empty = np.empty((0, 2)) if params.dim == 2 else np.empty(0)
        return (
            ParticleState(new_time, state.positions, state.mass_per_particle),
            (empty, np.empty(0, dtype=np.int64)),
        )
    pos = state.positions + stream.gen.normal(0.0, math.sqrt(params.dt), state.positions.shape)
    u = stream.gen.random(n)
    mask = u < params.branch_rate * params.dt
    n_branch = int(mask.sum())
    if n_branch == 0:
        empty = np.empty((0, 2)) if params.dim == 2 else np.empty(0)
        return (
            ParticleState(new_time, pos, state.mass_per_particle),
            (empty, np.empty(0, dtype=np.int64)),
        )
    ks = sample_offspring(stream, _law_for(params.beta), n_branch)
    parent_pos = pos[mask]
    if params.dim == 1:
        children = np.repeat(parent_pos, ks)
        new_pos = np.concatenate([pos[~mask], children])
    else:
        children = np.repeat(parent_pos, ks, axis=0)
        new_pos = np.concatenate([pos[~mask], children], axis=0)
    return (
        ParticleState(new_time, new_pos, state.mass_per_particle),
        (parent_pos, ks),
    )


def simulate(
    mu: FiniteMeasure,
    params: ModelParams,
    functionals: Sequence[OccupationFunctional],
    stream: RngStream,
) -> PathRecorder:
    """Run the particle system to t_end, accumulating occupation integrals of
    the registered functionals on the step grid.

    Deterministic given the stream.  Raises ResourceLimitError if the
    particle count exceeds params.particle_cap (heavy-tail blowup guard).
    """
    names = [f.name for f in functionals]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate functional names: {names}")
    n_steps = params.n_steps
    state = init_particles(mu, params, stream)

    step_times = np.empty(n_steps + 1)
    masses = np.empty(n_steps + 1)
    mass_occ = np.zeros(n_steps + 1)
    step_times[0] = 0.0
    masses[0] = state.total_mass
    values_prev = {f.name: f.state_value(state) for f in functionals}
    cum = {f.name: np.zeros(f.width) for f in functionals}
    ckpt_times: dict[str, list[float]] = {f.name: [0.0] for f in functionals}
    ckpt_values: dict[str, list[np.ndarray]] = {
        f.name: [np.zeros(f.width)] for f in functionals
    }

    snapshot_times = [0.0]
    snapshots = [state.positions.copy()]
    ev_step_idx: list[int] = []
    ev_locations: list[np.ndarray] = []
    ev_offspring: list[np.ndarray] = []
    extinction_time = math.inf if state.count > 0 else 0.0

    for i in range(1, n_steps + 1):
        state, (locs, ks) = step(state, params, stream)
        state.time = i * params.dt  # avoid additive drift over many steps
        if state.count > params.particle_cap:
            raise ResourceLimitError(
                f"particle count {state.count} exceeded cap {params.particle_cap} "
                f"at t={state.time:.6g}"
            )
        step_times[i] = state.time
        masses[i] = state.total_mass
        mass_occ[i] = mass_occ[i - 1] + 0.5 * (masses[i] + masses[i - 1]) * params.dt
        for f in functionals:
            v = f.state_value(state)
            cum[f.name] = cum[f.name] + 0.5 * (v + values_prev[f.name]) * params.dt
            values_prev[f.name] = v
            if i % f.checkpoint_stride == 0 or i == n_steps:
                ckpt_times[f.name].append(state.time)
                ckpt_values[f.name].append(cum[f.name])
        if ks.size:
            ev_step_idx.append(i)
            ev_locations.append(locs)
            ev_offspring.append(ks)
        if math.isinf(extinction_time) and state.count == 0:
            extinction_time = state.time
        if i % params.snapshot_stride == 0 or i == n_steps:
            snapshot_times.append(state.time)
            snapshots.append(state.positions.copy())

    occ = {
        f.name: OccupationSeries(
            times=np.asarray(ckpt_times[f.name]),
            values=np.vstack(ckpt_values[f.name]),
            meta=dict(f.meta),
        )
        for f in functionals
    }

    if ev_step_idx:
        counts = [k.size for k in ev_offspring]
        event_times = np.repeat(step_times[ev_step_idx], counts)
        event_locations = np.concatenate(ev_locations)
        event_offspring = np.concatenate(ev_offspring)
    else:
        event_times = np.empty(0)
        event_locations = np.empty((0, 2)) if params.dim == 2 else np.empty(0)
        event_offspring = np.empty(0, dtype=np.int64)
    event_net_mass = (event_offspring - 1) * params.mass_per_particle

    return PathRecorder(
        params=params,
        step_times=step_times,
        masses=masses,
        mass_occupation=mass_occ,
        occupations=occ,
        snapshot_times=np.asarray(snapshot_times),
        snapshots=snapshots,
        event_times=event_times,
        event_locations=event_locations,
        event_offspring=event_offspring,
        event_net_mass=event_net_mass,
        extinction_time=extinction_time,
        final_positions=state.positions,
    )


def martingale_event_sum(recorder: PathRecorder, f, t: float) -> float:
    """Branching-martingale estimate: sum of f(location) * net_mass over
    events up to t.  Exact at the particle level for any bounded f."""
    sl = recorder.events_until(t)
    if sl.stop == 0:
        return 0.0
    vals = np.asarray(f(recorder.event_locations[sl]))
    return float(np.sum(vals * recorder.event_net_mass[sl]))


def extract_big_jumps(recorder: PathRecorder, threshold: float) -> list[tuple]:
    """All logged events with net mass strictly above the threshold."""
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    mask = recorder.event_net_mass > threshold
    times = recorder.event_times[mask]
    locs = recorder.event_locations[mask]
    sizes = recorder.event_net_mass[mask]
    if recorder.params.dim == 1:
        return [(float(t), float(x), float(r)) for t, x, r in zip(times, locs, sizes)]
    return [(float(t), (float(x[0]), float(x[1])), float(r)) for t, x, r in zip(times, locs, sizes)]


def interval_jump_max(recorder: PathRecorder, x1: float, x2: float, t: float) -> float:
    """Largest upward mass jump located in [x1, x2] before t (0 if none).

    Deaths (offspring 0) move mass downward and never count as interval
    jumps, matching the superprocess whose jumps are all upward atoms.
    """
    if not x1 < x2:
        raise ValueError(f"need x1 < x2, got ({x1}, {x2})")
    if recorder.params.dim != 1:
        raise UsageError("interval_jump_max is defined for d=1 recorders only")
    sl = recorder.events_until(t)
    locs = recorder.event_locations[sl]
    net = recorder.event_net_mass[sl]
    mask = (locs >= x1) & (locs <= x2) & (net > 0)
    if not mask.any():
        return 0.0
    return float(net[mask].max())


# ---------------------------------------------------------------------------
# Plain-text persistence: one event per line, and a long-format snapshot CSV.
# ---------------------------------------------------------------------------


def save_events(recorder: PathRecorder, path: str | Path) -> None:
    """Line-oriented event log: 'time location offspring' per line
    ('time x y offspring' in d=2)."""
    lines = []
    if recorder.params.dim == 1:
        for t, x, k in zip(
            recorder.event_times, recorder.event_locations, recorder.event_offspring
        ):
            lines.append(f"{fnum(t)} {fnum(x)} {int(k)}")
    else:
        for t, xy, k in zip(
            recorder.event_times, recorder.event_locations, recorder.event_offspring
        ):
            lines.append(f"{fnum(t)} {fnum(xy[0])} {fnum(xy[1])} {int(k)}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_events(path: str | Path, dim: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read an event log back as (times, locations, offspring)."""
    times, locs, ks = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        times.append(float(parts[0]))
        if dim == 1:
            locs.append(float(parts[1]))
            ks.append(int(parts[2]))
        else:
            locs.append((float(parts[1]), float(parts[2])))
            ks.append(int(parts[3]))
    return np.asarray(times), np.asarray(locs), np.asarray(ks, dtype=np.int64)


def save_snapshots(recorder: PathRecorder, path: str | Path) -> None:
    """Snapshot CSV: header then one row per particle per snapshot time."""
    cols = "time,particle,x" if recorder.params.dim == 1 else "time,particle,x,y"
    lines = [cols]
    for t, pos in zip(recorder.snapshot_times, recorder.snapshots):
        if recorder.params.dim == 1:
            for j, x in enumerate(pos):
                lines.append(f"{fnum(t)},{j},{fnum(x)}")
        else:
            for j, xy in enumerate(pos):
                lines.append(f"{fnum(t)},{j},{fnum(xy[0])},{fnum(xy[1])}")
    Path(path).write_text("\n".join(lines) + "\n")
