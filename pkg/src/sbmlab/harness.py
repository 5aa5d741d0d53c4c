"""Experiment orchestration: deterministic replica execution (optionally on
a worker pool), per-replica record persistence, associative merging, and
CSV emission.

Determinism contract: replica i always uses the stream (seed, replica_start
+ i) regardless of worker count; cap-hit replicas are resampled on stream
(seed, i + attempt * 2^32) and counted into the censoring rate.  Merged
statistics are reduced from records sorted by replica index, so rerunning a
config (or changing the worker count) reproduces every numeric output
byte for byte.  report.json carries no timestamps; wall-clock goes to
stdout only.

Artifact formats: per-replica summaries as JSONL records (one per line);
tables as CSV whose first line is a `# schema=... config=<hash>` header;
particle paths as the line-oriented event file ("time location offspring"
per line) and a long-format snapshot CSV.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, canonical_lines, config_hash, parse_config_text
from .continuity import CriterionParams, gs_series, holder_exponent, unboundedness_probe
from .errors import ConfigError, ResourceLimitError, SbmlabError
from .kernels import green_closed, heat_kernel
from .loglaplace import GridSpec, smoothed_indicator, solve_mild
from .measures import FiniteMeasure, dirac, load_measure
from .particles import (
    OccupationFunctional,
    make_params,
    save_events,
    save_snapshots,
    simulate,
)
from .rng import RngStream
from .textio import fnum
from .stable_path import (
    calibrate_smalljump_bound,
    compute_T,
    inf_tail_oracle,
    inf_tail_probability,
    interval_martingale,
)
from .tanaka import (
    estimate_local_time,
    ftc_check,
    histogram_functional,
    interval_indicator_functional,
    martingale_split,
    psi0_power_functional,
    tanaka_panel_functional,
    tanaka_panel_terms,
)

__all__ = ["RunReport", "run_experiment", "merge_reports", "check_report"]

_SCHEMA_VERSION = "v1"


@dataclass
class RunReport:
    kind: str
    config_hash: str
    config_lines: list[str]
    replicas: int
    merged: dict  # field -> {n, mean, se}
    extra: dict  # kind-specific derived results (z-scores, slopes, oracles)
    censoring_rate: float
    status: str  # ok | degraded
    artifacts: list[str]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        return RunReport(**json.loads(text))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_lines(schema: str, cfg_hash: str, header: str, rows: list[str]) -> str:
    head = f"# schema=sbmlab.{schema}.{_SCHEMA_VERSION} config={cfg_hash}"
    return "\n".join([head, header, *rows]) + "\n"


def _initial_measure(cfg: ExperimentConfig) -> FiniteMeasure:
    if cfg.initial_measure is None:
        return dirac(0.0)
    return load_measure(cfg.initial_measure)


def _model_params(cfg: ExperimentConfig, snapshot_stride: int | None = None):
    return make_params(
        cfg.beta,
        cfg.n_scale,
        cfg.t_end,
        dim=cfg.dim,
        dt=cfg.dt,
        particle_cap=cfg.particle_cap,
        snapshot_stride=snapshot_stride if snapshot_stride is not None else cfg.snapshot_stride,
    )


def _phi(cfg: ExperimentConfig):
    return smoothed_indicator(cfg.phi_a, cfg.phi_b, cfg.phi_height, cfg.phi_ramp)


# ---------------------------------------------------------------------------
# Per-replica records, one function per experiment kind
# ---------------------------------------------------------------------------


def _functionals(cfg: ExperimentConfig):
    xs = cfg.panel_grid()
    if cfg.kind == "tanaka":
        return [
            tanaka_panel_functional(cfg.lam, xs),
            tanaka_panel_functional(cfg.lam_alt, xs),
            histogram_functional(-8.0, 8.0, min(cfg.bandwidth / 4.0, 0.025),
                                 checkpoint_stride=100),
        ]
    if cfg.kind == "timechange":
        return [
            psi0_power_functional(cfg.lam, cfg.x1, cfg.x2, cfg.beta),
            interval_indicator_functional(cfg.x1, cfg.x2),
        ]
    return []


def _record_simulate(cfg: ExperimentConfig, rec) -> dict:
    out = {
        "final_mass": float(rec.masses[-1]),
        "total_occupation": float(rec.mass_occupation[-1]),
        "event_count": float(rec.event_times.size),
        "extinct": 1.0 if math.isfinite(rec.extinction_time) else 0.0,
        "extinction_time": rec.extinction_time if math.isfinite(rec.extinction_time) else -1.0,
        "max_jump": float(rec.event_net_mass.max()) if rec.event_net_mass.size else 0.0,
    }
    return out


def _record_duality(cfg: ExperimentConfig, rec) -> dict:
    phi = _phi(cfg)
    pos = rec.final_positions
    mass = rec.params.mass_per_particle
    x_phi = mass * float(np.sum(phi(pos))) if pos.size else 0.0
    return {"laplace_value": math.exp(-x_phi), "final_mass": float(rec.masses[-1])}


def _record_tanaka(cfg: ExperimentConfig, rec, mu0) -> dict:
    out = {}
    t = cfg.t_end
    lt = estimate_local_time(rec, t, np.asarray(cfg.x_eval), cfg.bandwidth)
    for lam in (cfg.lam, cfg.lam_alt):
        panel = tanaka_panel_terms(rec, mu0, lam, t)
        for x in cfg.x_eval:
            j = int(np.argmin(np.abs(panel.xs - x)))
            out[f"L_tanaka:lam={lam:g}:x={x:g}"] = float(panel.local_time[j])
            out[f"H:lam={lam:g}:x={x:g}"] = float(panel.deriv_field[j])
    for k, x in enumerate(cfg.x_eval):
        out[f"L_kernel:x={x:g}"] = float(lt.values[k])
        out[f"ftc_abs:x={x:g}"] = abs(ftc_check(rec, mu0, cfg.lam, t, x))
    return out


def _record_moments(cfg: ExperimentConfig, rec) -> dict:
    out = {}
    for d in cfg.distances:
        vals = []
        for c in cfg.pair_centers:
            i_part, z_part = martingale_split(rec, cfg.lam, c - d / 2, c + d / 2, cfg.t_end)
            vals.append(abs(i_part - z_part) ** cfg.q_moment)
        out[f"moment:d={d:g}"] = float(np.mean(vals))
    return out


def _jump_levels(cfg: ExperimentConfig) -> np.ndarray:
    lo, hi, count = cfg.jump_units
    ms = np.unique(np.round(np.logspace(np.log10(lo), np.log10(hi), int(count))))
    return (ms + 0.5) / cfg.n_scale


def _record_jumps(cfg: ExperimentConfig, rec) -> dict:
    ys = _jump_levels(cfg)
    return {
        f"count:y={y:g}": float(np.sum(rec.event_net_mass > y)) for y in ys
    }


def _record_timechange(cfg: ExperimentConfig, rec) -> dict:
    t = cfg.t_end
    t_hat = compute_T(rec, cfg.lam, cfg.x1, cfg.x2, t)
    z_hat = interval_martingale(rec, cfg.lam, cfg.x1, cfg.x2, t)
    series = rec.find_series("interval", x1=cfg.x1, x2=cfg.x2)
    occ = float(series.at(t)[0])
    return {"T_hat": t_hat, "Z_hat": z_hat, "interval_occupation": occ}


def _record_unbounded2d(cfg: ExperimentConfig, rec) -> dict:
    lo, hi = cfg.window
    win = ((lo, hi), (lo, hi)) if cfg.dim == 2 else (lo, hi)
    table = unboundedness_probe(rec, cfg.resolutions, win)
    return {f"max_density:h={h:g}": v for h, v in table}


def _run_one_replica(cfg: ExperimentConfig, index: int, out_dir: str) -> dict:
    mu0 = _initial_measure(cfg)
    params = _model_params(cfg)
    functionals = _functionals(cfg)
    attempt = 0
    while True:
        stream = RngStream(cfg.seed, index + (attempt << 32))
        try:
            rec = simulate(mu0, params, functionals, stream)
            break
        except ResourceLimitError:
            attempt += 1
            if attempt > cfg.max_retries:
                return {"_retries": float(attempt), "_failed": 1.0}
    if cfg.kind == "simulate" and (
        cfg.save_paths == "all" or (cfg.save_paths == "first" and index == cfg.replica_start)
    ):
        save_events(rec, Path(out_dir) / f"events-replica{index}.txt")
        save_snapshots(rec, Path(out_dir) / f"snapshots-replica{index}.csv")
    if cfg.kind == "simulate":
        record = _record_simulate(cfg, rec)
    elif cfg.kind == "duality":
        record = _record_duality(cfg, rec)
    elif cfg.kind == "tanaka":
        record = _record_tanaka(cfg, rec, mu0)
    elif cfg.kind == "moments":
        record = _record_moments(cfg, rec)
    elif cfg.kind == "jumps":
        record = _record_jumps(cfg, rec)
    elif cfg.kind == "timechange":
        record = _record_timechange(cfg, rec)
    elif cfg.kind == "unbounded2d":
        record = _record_unbounded2d(cfg, rec)
    else:
        raise SbmlabError(f"kind {cfg.kind} has no replica handler")
    record["_retries"] = float(attempt)
    return record


def _worker(payload) -> list[tuple[int, dict]]:
    cfg_lines, indices, out_dir = payload
    cfg = parse_config_text("\n".join(cfg_lines))
    return [(i, _run_one_replica(cfg, i, out_dir)) for i in indices]


def _run_replicas(cfg: ExperimentConfig, out_dir: str) -> dict[int, dict]:
    indices = list(range(cfg.replica_start, cfg.replica_start + cfg.replicas))
    lines = canonical_lines(cfg)
    if cfg.workers == 1:
        pairs = _worker((lines, indices, out_dir))
    else:
        chunks = [indices[k :: cfg.workers] for k in range(cfg.workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = pool.map(_worker, [(lines, c, out_dir) for c in chunks])
        pairs = [pair for chunk in results for pair in chunk]
    return dict(sorted(pairs))


# ---------------------------------------------------------------------------
# Merging and kind-specific finalization
# ---------------------------------------------------------------------------


def _merge_records(records: dict[int, dict]) -> dict:
    keys = sorted({k for r in records.values() for k in r if not k.startswith("_")})
    merged = {}
    for key in keys:
        vals = [r[key] for _, r in sorted(records.items()) if key in r]
        n = len(vals)
        mean = float(np.mean(vals)) if n else math.nan
        se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        merged[key] = {"n": n, "mean": mean, "se": se}
    return merged


def _finalize_duality(cfg, records, merged, out_dir, cfg_hash) -> dict:
    grids = GridSpec(cfg.solver_x_min, cfg.solver_x_max, cfg.solver_nx, cfg.solver_nt)
    sol = solve_mild(_phi(cfg), cfg.t_end, cfg.beta, grids)
    mu0 = _initial_measure(cfg)
    rhs = math.exp(-mu0.integrate(sol.interpolator(cfg.t_end)))
    lhs = merged["laplace_value"]["mean"]
    se = merged["laplace_value"]["se"]
    z = abs(lhs - rhs) / se if se > 0 else (0.0 if lhs == rhs else math.inf)
    rows = [f"{fnum(lhs)},{fnum(se)},{fnum(rhs)},{fnum(z)},{fnum(sol.residual)}"]
    _atomic_write(
        Path(out_dir) / "duality.csv",
        _csv_lines("duality", cfg_hash, "lhs,lhs_se,rhs,z_score,solver_residual", rows),
    )
    return {"lhs": lhs, "lhs_se": se, "rhs": rhs, "z_score": z,
            "solver_residual": sol.residual, "artifact_tables": ["duality.csv"]}


def _finalize_tanaka(cfg, records, merged, out_dir, cfg_hash) -> dict:
    # decomposition table for the first recorded replica, on the full panel
    mu0 = _initial_measure(cfg)
    params = _model_params(cfg)
    rec = simulate(mu0, params, _functionals(cfg), RngStream(cfg.seed, cfg.replica_start))
    rows = []
    for lam in (cfg.lam, cfg.lam_alt):
        panel = tanaka_panel_terms(rec, mu0, lam, cfg.t_end)
        from .tanaka import tanaka_terms

        for x in panel.xs:
            d = tanaka_terms(rec, mu0, lam, cfg.t_end, float(x))
            rows.append(
                ",".join(
                    repr(v)
                    for v in (
                        d.t, d.x, d.lam, d.term_initial, d.term_terminal,
                        d.term_occupation, d.term_martingale, d.local_time,
                        d.recentered, d.deriv_field,
                    )
                )
            )
    _atomic_write(
        Path(out_dir) / "tanaka_panel.csv",
        _csv_lines(
            "tanaka.panel",
            cfg_hash,
            "t,x,lambda,term_initial,term_terminal,term_occupation,term_martingale,"
            "local_time,recentered,deriv_field",
            rows,
        ),
    )
    extra = {"artifact_tables": ["tanaka_panel.csv"]}
    for x in cfg.x_eval:
        a = f"L_tanaka:lam={cfg.lam:g}:x={x:g}"
        b = f"L_tanaka:lam={cfg.lam_alt:g}:x={x:g}"
        diffs = [
            records[i][a] - records[i][b]
            for i in sorted(records)
            if a in records[i] and b in records[i]
        ]
        n = len(diffs)
        mean = float(np.mean(diffs))
        se = float(np.std(diffs, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        extra[f"lambda_diff_z:x={x:g}"] = abs(mean) / se if se > 0 else 0.0
    return extra


def _finalize_moments(cfg, records, merged, out_dir, cfg_hash) -> dict:
    ds = np.asarray(sorted(cfg.distances))
    means = np.array([merged[f"moment:d={d:g}"]["mean"] for d in ds])
    ses = np.array([merged[f"moment:d={d:g}"]["se"] for d in ds])
    slope = float(np.polyfit(np.log(ds), np.log(means), 1)[0])
    rows = [f"{fnum(d)},{fnum(m)},{fnum(s)}" for d, m, s in zip(ds, means, ses)]
    _atomic_write(
        Path(out_dir) / "moments.csv",
        _csv_lines("moments", cfg_hash, "distance,moment,se", rows),
    )
    return {"slope": slope, "q": cfg.q_moment, "artifact_tables": ["moments.csv"]}


def _finalize_jumps(cfg, records, merged, out_dir, cfg_hash) -> dict:
    mu0 = _initial_measure(cfg)
    ys = _jump_levels(cfg)
    params = _model_params(cfg)
    rows, zs = [], []
    means = []
    for y in ys:
        m = merged[f"count:y={y:g}"]
        oracle = (
            params.c_beta
            * cfg.t_end
            * mu0.total_mass
            * y ** (-1.0 - cfg.beta)
            / (1.0 + cfg.beta)
        )
        z = (m["mean"] - oracle) / m["se"] if m["se"] > 0 else math.inf
        zs.append(z)
        means.append(m["mean"])
        rows.append(f"{fnum(y)},{fnum(m['mean'])},{fnum(m['se'])},{fnum(oracle)},{fnum(z)}")
    means_arr = np.asarray(means)
    pos = means_arr > 0
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(np.asarray(ys)[pos]), np.log(means_arr[pos]), 1)[0])
    else:
        slope = math.nan
    _atomic_write(
        Path(out_dir) / "jumps.csv",
        _csv_lines("jumps", cfg_hash, "y,mean_count,se,compensator_oracle,z", rows),
    )
    return {
        "levels": [float(y) for y in ys],
        "z_scores": [float(z) for z in zs],
        "slope": slope,
        "artifact_tables": ["jumps.csv"],
    }


def _finalize_timechange(cfg, records, merged, out_dir, cfg_hash) -> dict:
    z_vals = np.array([records[i]["Z_hat"] for i in sorted(records) if "Z_hat" in records[i]])
    t_vals = np.array([records[i]["T_hat"] for i in sorted(records) if "T_hat" in records[i]])
    occ = np.array(
        [records[i]["interval_occupation"] for i in sorted(records) if "T_hat" in records[i]]
    )
    power = 1.0 + cfg.beta
    rows = []
    zs, pzs = [], []
    n = z_vals.size
    for theta in cfg.theta_grid:
        a = np.exp(-theta * z_vals)
        b = np.exp(theta**power * t_vals)
        c = a * np.exp(-(theta**power) * t_vals)
        lhs, rhs = float(a.mean()), float(b.mean())
        lhs_se = float(a.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        rhs_se = float(b.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        dse = float(np.std(a - b, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        z = abs(lhs - rhs) / dse if dse > 0 else 0.0
        prod = float(c.mean())
        pse = float(c.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        pz = abs(prod - 1.0) / pse if pse > 0 else 0.0
        zs.append(z)
        pzs.append(pz)
        rows.append(
            f"{fnum(theta)},{fnum(lhs)},{fnum(rhs)},{fnum(lhs_se)},{fnum(rhs_se)},{fnum(z)},{fnum(prod)},{fnum(pse)},{fnum(pz)}"
        )
    bound = 2.0**power * occ
    violations = int(np.sum(t_vals > bound * (1 + 1e-12) + 1e-15))
    _atomic_write(
        Path(out_dir) / "timechange.csv",
        _csv_lines(
            "timechange",
            cfg_hash,
            "theta,lhs,rhs,se_lhs,se_rhs,z,product_mean,product_se,product_z",
            rows,
        ),
    )
    return {
        "theta_grid": list(cfg.theta_grid),
        "z_scores": [float(z) for z in zs],
        "product_z_scores": [float(z) for z in pzs],
        "t_bound_violations": violations,
        "artifact_tables": ["timechange.csv"],
    }


def _finalize_unbounded2d(cfg, records, merged, out_dir, cfg_hash) -> dict:
    rows = []
    medians = {}
    for h in cfg.resolutions:
        key = f"max_density:h={h:g}"
        vals = [records[i][key] for i in sorted(records) if key in records[i]]
        medians[h] = float(np.median(vals))
        rows.append(f"{fnum(h)},{fnum(medians[h])},{fnum(merged[key]['mean'])},{fnum(merged[key]['se'])}")
    hs = sorted(cfg.resolutions, reverse=True)  # coarse -> fine
    med_seq = [medians[h] for h in hs]
    increasing = all(b > a for a, b in zip(med_seq, med_seq[1:]))
    ratio = med_seq[-1] / med_seq[0] if med_seq[0] > 0 else math.inf
    _atomic_write(
        Path(out_dir) / "unbounded_probe.csv",
        _csv_lines("unbounded2d", cfg_hash, "bin_width,median_max_density,mean,se", rows),
    )
    return {
        "median_max_density": {f"{h:g}": medians[h] for h in hs},
        "strictly_increasing": increasing,
        "finest_to_coarsest_ratio": ratio,
        "artifact_tables": ["unbounded_probe.csv"],
    }


def _finalize_simulate(cfg, records, merged, out_dir, cfg_hash) -> dict:
    rows = []
    for i in sorted(records):
        r = records[i]
        if "_failed" in r:
            continue
        rows.append(
            f"{i},{fnum(r['final_mass'])},{fnum(r['total_occupation'])},"
            f"{int(r['event_count'])},{fnum(r['extinction_time'])}"
        )
    _atomic_write(
        Path(out_dir) / "simulate_summary.csv",
        _csv_lines(
            "simulate",
            cfg_hash,
            "replica,final_mass,total_occupation,event_count,extinction_time",
            rows,
        ),
    )
    return {"artifact_tables": ["simulate_summary.csv"]}


# --- kinds without particle replicas ---------------------------------------


def _run_stabletails(cfg: ExperimentConfig, out_dir, cfg_hash):
    stream = RngStream(cfg.seed, 0)
    xs = np.asarray(cfg.inf_x_values)
    probs = np.array(
        [
            inf_tail_probability(cfg.beta, cfg.t_end, x, cfg.replicas, stream, cfg.path_steps)
            for x in xs
        ]
    )
    oracle = np.asarray(inf_tail_oracle(cfg.beta, cfg.t_end, xs))
    resolved = (probs > 20.0 / cfg.replicas) & (probs < 0.8)
    if resolved.sum() >= 2:
        mc_slope = float(
            np.polyfit(np.log(xs[resolved]), np.log(-np.log(probs[resolved])), 1)[0]
        )
    else:
        mc_slope = math.nan
    deep_x = np.array([4.5, 7.0, 10.0, 15.0])
    deep_p = np.asarray(inf_tail_oracle(cfg.beta, cfg.t_end, deep_x))
    oracle_slope = float(np.polyfit(np.log(deep_x), np.log(-np.log(deep_p)), 1)[0])
    rows = [
        f"{fnum(x)},{fnum(p)},{fnum(o)}" for x, p, o in zip(xs, probs, oracle)
    ]
    _atomic_write(
        Path(out_dir) / "inftail.csv",
        _csv_lines("stabletails.inf", cfg_hash, "x,p_hat,first_passage_oracle", rows),
    )
    calibration = [(0.1, 0.5, 0.25), (0.1, 0.6, 0.3), (0.05, 0.3, 0.15), (0.1, 0.4, 0.2)]
    holdout = [
        (0.1, 0.3, 0.15),
        (0.1, 0.3, 0.2),
        (0.2, 0.4, 0.2),
        (0.2, 0.3, 0.15),
        (0.1, 0.45, 0.22),
    ]
    sj = calibrate_smalljump_bound(
        cfg.beta, calibration, holdout, cfg.replicas, RngStream(cfg.seed, 1), cfg.path_steps
    )
    rows = [
        f"cal,{fnum(t)},{fnum(x)},{fnum(y)},{fnum(p)}," for (t, x, y, p) in sj.calibration
    ] + [
        f"holdout,{fnum(t)},{fnum(x)},{fnum(y)},{fnum(p)},{fnum(b)}" for (t, x, y, p, b) in sj.holdout
    ]
    _atomic_write(
        Path(out_dir) / "smalljump.csv",
        _csv_lines("stabletails.smalljump", cfg_hash, "set,t,x,y,p_hat,bound", rows),
    )
    records = {
        0: {
            **{f"inf_p:x={x:g}": float(p) for x, p in zip(xs, probs)},
            "_retries": 0.0,
        }
    }
    extra = {
        "mc_slope_resolved": mc_slope,
        "oracle_slope_deep": oracle_slope,
        "target_slope": (1.0 + cfg.beta) / cfg.beta,
        "smalljump_c_fitted": sj.c_fitted,
        "smalljump_violations": sj.violations,
        "max_abs_oracle_gap": float(np.max(np.abs(probs[resolved] - oracle[resolved])))
        if resolved.any()
        else math.nan,
        "artifact_tables": ["inftail.csv", "smalljump.csv"],
    }
    return records, extra


def _run_criterion(cfg: ExperimentConfig, out_dir, cfg_hash):
    params = CriterionParams(
        beta=cfg.beta,
        gamma=cfg.gamma,
        q=cfg.q_criterion,
        k_window=cfg.k_window,
        r=cfg.r_grid[0] if cfg.r_grid else 1.0,
        c_free=cfg.c_free,
        n_max=cfg.n_max,
    )
    rep = gs_series(params, r_grid=cfg.r_grid)
    block = [
        f"beta = {fnum(cfg.beta)}",
        f"gamma = {fnum(cfg.gamma)}",
        f"q = {fnum(cfg.q_criterion)}",
        f"k_window = {fnum(cfg.k_window)}",
        f"c_free = {fnum(cfg.c_free)}",
        f"g_closed = {fnum(rep.g_closed)}",
        f"g_partial = {fnum(rep.g_partial)}",
        f"g_tail_bound = {fnum(rep.g_tail_bound)}",
        f"q_a_value = {fnum(rep.q_a.value)}",
        f"q_a_convergent = {rep.q_a.convergent}",
        f"q_b_value = {fnum(rep.q_b.value)}",
        f"q_b_convergent = {rep.q_b.convergent}",
        f"q_b_certified = {rep.q_b.certified}",
        f"q_c_value = {fnum(rep.q_c.value)}",
        f"q_c_convergent = {rep.q_c.convergent}",
        f"q_c_certified = {rep.q_c.certified}",
        f"q_total = {fnum(rep.q_total)}",
        f"q_trend_decreasing = {rep.q_trend_decreasing}",
    ]
    _atomic_write(Path(out_dir) / "criterion.txt", "\n".join(block) + "\n")
    rows = [f"{fnum(r)},{fnum(v)}" for r, v in zip(rep.r_grid, rep.q_trend)]
    _atomic_write(
        Path(out_dir) / "criterion_rgrid.csv",
        _csv_lines("criterion.rgrid", cfg_hash, "r,q_total", rows),
    )
    extra = {
        "g_closed": rep.g_closed,
        "q_convergent": [rep.q_a.convergent, rep.q_b.convergent, rep.q_c.convergent],
        "q_trend_decreasing": rep.q_trend_decreasing,
        "q_trend_final": float(rep.q_trend[-1]),
        "artifact_tables": ["criterion.txt", "criterion_rgrid.csv"],
    }
    return {0: {"q_total": rep.q_total, "_retries": 0.0}}, extra


def _holder_field(cfg: ExperimentConfig):
    if cfg.holder_input is not None:
        vals = np.loadtxt(cfg.holder_input, delimiter=",")
        return np.atleast_1d(vals), 1.0
    n = 4096
    if cfg.holder_synthetic == "linear":
        return np.linspace(0.0, 1.0, n), 1.0 / (n - 1)
    if cfg.holder_synthetic == "sqrt_cusp":
        x = np.linspace(0.0, 1.0, n)
        return np.abs(x - 0.5) ** 0.5, 1.0 / (n - 1)
    if cfg.holder_synthetic == "brownian":
        gen = RngStream(cfg.seed, 0).gen
        return np.cumsum(gen.normal(0.0, math.sqrt(1.0 / n), n)), 1.0 / n
    raise ConfigError([f"unknown holder_synthetic {cfg.holder_synthetic!r}"])


def _run_holder(cfg: ExperimentConfig, out_dir, cfg_hash):
    field_vals, dx = _holder_field(cfg)
    lo, hi = (int(v) for v in cfg.holder_lags)
    fit = holder_exponent(field_vals, (lo, hi), dx=dx)
    rows = [f"{fnum(s)},{fnum(w)}" for s, w in zip(fit.scales, fit.oscillations)]
    _atomic_write(
        Path(out_dir) / "holder.csv",
        _csv_lines("holder", cfg_hash, "scale,oscillation", rows),
    )
    extra = {
        "exponent": fit.exponent,
        "ci_low": fit.ci_low,
        "ci_high": fit.ci_high,
        "artifact_tables": ["holder.csv"],
    }
    return {0: {"exponent": fit.exponent, "_retries": 0.0}}, extra


_FINALIZERS = {
    "simulate": _finalize_simulate,
    "duality": _finalize_duality,
    "tanaka": _finalize_tanaka,
    "moments": _finalize_moments,
    "jumps": _finalize_jumps,
    "timechange": _finalize_timechange,
    "unbounded2d": _finalize_unbounded2d,
}


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Run one experiment end to end; deterministic given the config.

    Returns the RunReport and writes records.jsonl, report.json, and the
    kind-specific CSV artifacts into cfg.out.  Resource-cap errors surface
    in the censoring rate (status 'degraded' above 5%), never abort the
    batch.
    """
    violations = cfg.validate()
    if violations:
        raise ConfigError(violations)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    t0 = time.monotonic()

    if cfg.kind in _FINALIZERS:
        records = _run_replicas(cfg, str(out_dir))
        merged = _merge_records(records)
        extra = _FINALIZERS[cfg.kind](cfg, records, merged, out_dir, cfg_hash)
    elif cfg.kind == "stabletails":
        records, extra = _run_stabletails(cfg, out_dir, cfg_hash)
        merged = _merge_records(records)
    elif cfg.kind == "criterion":
        records, extra = _run_criterion(cfg, out_dir, cfg_hash)
        merged = _merge_records(records)
    elif cfg.kind == "holder":
        records, extra = _run_holder(cfg, out_dir, cfg_hash)
        merged = _merge_records(records)
    else:
        raise ConfigError([f"unhandled kind {cfg.kind!r}"])

    retries = sum(r.get("_retries", 0.0) for r in records.values())
    attempts = len(records) + retries
    censoring_rate = retries / attempts if attempts else 0.0
    status = "degraded" if censoring_rate > 0.05 else "ok"

    record_lines = [
        json.dumps({"replica": i, **records[i]}, sort_keys=True) for i in sorted(records)
    ]
    _atomic_write(out_dir / "records.jsonl", "\n".join(record_lines) + "\n")
    artifacts = sorted(
        ["records.jsonl", "report.json"] + list(extra.pop("artifact_tables", []))
    )
    report = RunReport(
        kind=cfg.kind,
        config_hash=cfg_hash,
        config_lines=canonical_lines(cfg),
        replicas=len(records),
        merged=merged,
        extra=extra,
        censoring_rate=censoring_rate,
        status=status,
        artifacts=artifacts,
    )
    _atomic_write(out_dir / "report.json", report.to_json() + "\n")
    print(f"[sbmlab] {cfg.kind}: {len(records)} replicas in {time.monotonic() - t0:.1f}s "
          f"(status {status}, hash {cfg_hash})")
    return report


def merge_reports(paths: list[str | Path], out: str | Path) -> RunReport:
    """Pool reports produced from the same config hash (differing only in
    replica ranges); statistics are recomputed from the union of records,
    making the merge associative and commutative."""
    if not paths:
        raise ConfigError(["merge needs at least one report directory"])
    reports = []
    all_records: dict[int, dict] = {}
    for p in paths:
        p = Path(p)
        rep = RunReport.from_json((p / "report.json").read_text())
        reports.append(rep)
        for line in (p / "records.jsonl").read_text().splitlines():
            row = json.loads(line)
            idx = int(row.pop("replica"))
            if idx in all_records:
                raise ConfigError([f"replica {idx} appears in more than one report"])
            all_records[idx] = row
    hashes = {r.config_hash for r in reports}
    if len(hashes) != 1:
        raise ConfigError([f"config hashes differ: {sorted(hashes)}"])
    cfg = parse_config_text("\n".join(reports[0].config_lines))
    total = len(all_records)
    cfg.replicas = total
    cfg.replica_start = min(all_records) if all_records else 0
    cfg.out = str(out)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = _merge_records(all_records)
    cfg_hash = reports[0].config_hash
    if cfg.kind in _FINALIZERS:
        extra = _FINALIZERS[cfg.kind](cfg, all_records, merged, out_dir, cfg_hash)
    else:
        extra = dict(reports[0].extra)
    retries = sum(r.get("_retries", 0.0) for r in all_records.values())
    attempts = total + retries
    censoring_rate = retries / attempts if attempts else 0.0
    record_lines = [
        json.dumps({"replica": i, **all_records[i]}, sort_keys=True)
        for i in sorted(all_records)
    ]
    _atomic_write(out_dir / "records.jsonl", "\n".join(record_lines) + "\n")
    artifacts = sorted(
        ["records.jsonl", "report.json"] + list(extra.pop("artifact_tables", []))
    )
    report = RunReport(
        kind=cfg.kind,
        config_hash=cfg_hash,
        config_lines=reports[0].config_lines,
        replicas=total,
        merged=merged,
        extra=extra,
        censoring_rate=censoring_rate,
        status="degraded" if censoring_rate > 0.05 else "ok",
        artifacts=artifacts,
    )
    _atomic_write(out_dir / "report.json", report.to_json() + "\n")
    return report


def check_report(report: RunReport) -> list[str]:
    """Acceptance-style threshold checks per kind (used by the CLI --check
    flag); returns the list of failures, empty when all pass."""
    fails = []
    e = report.extra
    if report.kind == "duality" and e.get("z_score", math.inf) > 3.0:
        fails.append(f"duality z-score {e['z_score']:.2f} > 3")
    if report.kind == "jumps":
        if any(abs(z) > 3.0 for z in e.get("z_scores", [])):
            fails.append(f"jump compensator z-scores {e['z_scores']} exceed 3")
        cfg = parse_config_text("\n".join(report.config_lines))
        target = -(1.0 + cfg.beta)
        if not abs(e.get("slope", math.nan) - target) <= 0.1:
            fails.append(f"jump tail slope {e['slope']:.3f} outside {target} +- 0.1")
    if report.kind == "timechange":
        if any(abs(z) > 3.0 for z in e.get("z_scores", [])):
            fails.append(f"timechange z-scores {e['z_scores']} exceed 3")
        if e.get("t_bound_violations", 0) > 0:
            fails.append(f"T-bound violated on {e['t_bound_violations']} replicas")
    if report.kind == "tanaka":
        for key, val in e.items():
            if key.startswith("lambda_diff_z") and val > 3.0:
                fails.append(f"{key} = {val:.2f} > 3")
    if report.kind == "stabletails" and e.get("smalljump_violations", 0) > 0:
        fails.append(f"smalljump holdout violations: {e['smalljump_violations']}")
    if report.kind == "criterion" and not e.get("q_trend_decreasing", False):
        fails.append("Q(0, r) trend is not strictly decreasing")
    return fails
