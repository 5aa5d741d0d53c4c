"""Branching particle engine: initialization, stepping, occupation
accumulators, event log statistics, and determinism."""
import math

import numpy as np
import pytest
from scipy.integrate import quad

from sbmlab.errors import ResourceLimitError, UsageError
from sbmlab.kernels import g_lambda, green_closed, heat_kernel
from sbmlab.measures import FiniteMeasure, dirac, gridded_density
from sbmlab.particles import (
    ModelParams,
    OccupationFunctional,
    PathRecorder,
    ParticleState,
    interval_jump_max,
    extract_big_jumps,
    init_particles,
    load_events,
    make_params,
    martingale_event_sum,
    save_events,
    save_snapshots,
    simulate,
    step,
)
from sbmlab.rng import RngStream


class TestModelParams:
    def test_dt_cap_violation_names_both_values(self):
        with pytest.raises(ValueError, match="branch_rate.*dt"):
            ModelParams(beta=0.5, n_scale=10000, dt=0.01, t_end=1.0)

    def test_beta_domain(self):
        for bad in (0.0, 1.0, -0.5):
            with pytest.raises(ValueError):
                ModelParams(beta=bad, n_scale=10, dt=1e-3, t_end=0.1)

    def test_derived_quantities(self):
        p = make_params(0.5, 400, 0.5)
        assert p.branch_rate == pytest.approx(1.5 * math.sqrt(400))
        assert p.mass_per_particle == pytest.approx(1 / 400)
        assert p.c_beta == pytest.approx(0.75 / math.gamma(0.5))
        assert p.branch_rate * p.dt <= 0.1 * (1 + 1e-9)
        assert p.n_steps * p.dt == pytest.approx(0.5, abs=1e-15)

    def test_dim_validation(self):
        with pytest.raises(ValueError):
            make_params(0.5, 10, 0.1, dim=3)


class TestInitParticles:
    def test_dirac_exact(self):
        p = make_params(0.5, 1000, 0.1)
        state = init_particles(dirac(0.0), p, RngStream(0, 0))
        assert state.count == 1000
        assert (state.positions == 0.0).all()

    def test_uniform_dkw(self):
        p = make_params(0.5, 10**4, 0.1)
        grid = np.linspace(0, 1, 101)
        mu = gridded_density(grid, np.ones(grid.size))
        state = init_particles(mu, p, RngStream(1, 0))
        xs = np.sort(state.positions)
        ecdf = np.arange(1, xs.size + 1) / xs.size
        assert np.max(np.abs(ecdf - xs)) < 0.02

    def test_mass_rounding(self):
        p = make_params(0.5, 1000, 0.1)
        grid = np.linspace(0, 1, 51)
        mu = gridded_density(grid, np.full(grid.size, 0.7116))
        state = init_particles(mu, p, RngStream(2, 0))
        assert abs(state.total_mass - mu.total_mass) <= 1.0 / 1000

    def test_zero_measure(self):
        p = make_params(0.5, 100, 0.1)
        mu = gridded_density(np.array([0.0, 1.0]), np.array([0.0, 0.0]))
        with pytest.raises(ValueError):
            init_particles(mu, p, RngStream(0, 0))

    def test_dim2_product(self):
        p = make_params(0.5, 500, 0.1, dim=2)
        state = init_particles(dirac(0.0), p, RngStream(0, 0))
        assert state.positions.shape == (500, 2)
        assert (state.positions == 0.0).all()


class TestStep:
    def test_extinct_stays_extinct(self):
        p = make_params(0.5, 100, 0.1)
        state = ParticleState(0.0, np.empty(0), p.mass_per_particle)
        new, (locs, ks) = step(state, p, RngStream(0, 0))
        assert new.count == 0 and ks.size == 0
        assert new.time == pytest.approx(p.dt)

    def test_displacement_variance_branch_free(self):
        # tiny dt makes branching astronomically unlikely: pure motion check
        p = ModelParams(beta=0.5, n_scale=1, dt=1e-8, t_end=1e-8)
        mu = dirac(0.0, mass=10**5)
        state = init_particles(mu, p, RngStream(3, 0))
        new, (locs, ks) = step(state, p, RngStream(3, 1))
        assert ks.size == 0
        var = new.positions.var(ddof=1)
        se = p.dt * math.sqrt(2.0 / (new.count - 1))
        assert abs(var - p.dt) <= 3 * se

    def test_one_step_criticality(self):
        p = make_params(0.5, 2000, 0.5)
        mu = dirac(0.0)
        masses = []
        for i in range(200):
            state = init_particles(mu, p, RngStream(4, i))
            new, _ = step(state, p, RngStream(5, i))
            masses.append(new.total_mass)
        masses = np.asarray(masses)
        se = masses.std(ddof=1) / math.sqrt(masses.size)
        assert abs(masses.mean() - 1.0) <= 3 * se + 1e-12


class TestSimulate:
    def test_t_end_zero(self):
        p = make_params(0.5, 100, 0.0)
        f = OccupationFunctional("one", lambda pos: np.ones(pos.shape[0]))
        rec = simulate(dirac(0.0), p, [f], RngStream(6, 0))
        assert rec.step_times.size == 1
        assert rec.snapshot_times.size == 1
        assert rec.occupations["one"].values[-1] == pytest.approx(0.0)
        assert rec.event_times.size == 0

    def test_unit_accumulator_equals_mass_trapezoid(self, bare_recorders):
        p = make_params(0.5, 300, 0.2)
        f = OccupationFunctional("one", lambda pos: np.ones(pos.shape[0]))
        rec = simulate(dirac(0.0), p, [f], RngStream(7, 0))
        direct = np.concatenate(
            [[0.0], np.cumsum(0.5 * (rec.masses[1:] + rec.masses[:-1]) * p.dt)]
        )
        assert np.array_equal(rec.occupations["one"].values[:, 0], direct)
        assert np.array_equal(rec.mass_occupation, direct)

    def test_mean_semigroup_formula(self):
        # replica mean of <X_t, f> vs <X_0, P_t f> for f = G_1(. - 0.5);
        # total mass (exact mean 1 by criticality) serves as control variate
        # to tame the infinite-variance mass fluctuations
        t = 0.25
        p = make_params(0.5, 500, t, snapshot_stride=10**9)
        mu = dirac(0.0)
        f = lambda y: green_closed(1.0, y - 0.5)
        vals, masses = [], []
        for i in range(300):
            rec = simulate(mu, p, [], RngStream(8, i))
            pos = rec.final_positions
            vals.append(p.mass_per_particle * float(np.sum(f(pos))))
            masses.append(rec.masses[-1])
        vals = np.asarray(vals)
        masses = np.asarray(masses)
        slope = np.cov(vals, masses)[0, 1] / np.var(masses)
        adjusted = vals - slope * (masses - 1.0)
        oracle, _ = quad(lambda y: heat_kernel(t, y) * f(y), -30, 30, epsabs=1e-12)
        se = adjusted.std(ddof=1) / math.sqrt(adjusted.size)
        assert abs(adjusted.mean() - oracle) <= 3 * se

    def test_criticality_at_snapshots(self, bare_recorders):
        _, params, recs = bare_recorders
        masses = np.array([r.masses[-1] for r in recs])
        se = masses.std(ddof=1) / math.sqrt(masses.size)
        assert abs(masses.mean() - 1.0) <= 3 * se

    def test_mean_occupation_formula(self, bare_recorders):
        # replica mean of the f-accumulator vs int_0^t <X_0, P_s f> ds
        _, params, _ = bare_recorders
        t = 0.3
        p = make_params(0.5, 400, t, snapshot_stride=10**9)
        f_call = lambda y: green_closed(1.0, y - 0.5)
        f = OccupationFunctional("g", lambda pos: f_call(pos))
        vals = []
        for i in range(200):
            rec = simulate(dirac(0.0), p, [f], RngStream(9, i))
            vals.append(rec.occupations["g"].values[-1, 0])
        vals = np.asarray(vals)

        def p_s_f(s):
            return quad(lambda y: heat_kernel(s, y) * f_call(y), -30, 30, epsabs=1e-12)[0]

        oracle = quad(p_s_f, 0, t, epsabs=1e-10, limit=100)[0]
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - oracle) <= 3 * se

    def test_determinism_bitwise(self):
        p = make_params(0.5, 300, 0.2)
        xs = np.linspace(-1, 1, 11)
        from sbmlab.tanaka import tanaka_panel_functional

        rec1 = simulate(dirac(0.0), p, [tanaka_panel_functional(1.0, xs)], RngStream(10, 0))
        rec2 = simulate(dirac(0.0), p, [tanaka_panel_functional(1.0, xs)], RngStream(10, 0))
        assert np.array_equal(rec1.final_positions, rec2.final_positions)
        assert np.array_equal(rec1.event_net_mass, rec2.event_net_mass)
        assert np.array_equal(
            rec1.occupations["tanaka_panel:1"].values,
            rec2.occupations["tanaka_panel:1"].values,
        )

    def test_particle_cap(self):
        p = make_params(0.5, 1000, 0.5, particle_cap=900)
        with pytest.raises(ResourceLimitError):
            simulate(dirac(0.0), p, [], RngStream(11, 0))

    def test_event_sizes_on_lattice(self, bare_recorders):
        _, params, recs = bare_recorders
        for rec in recs[:20]:
            ks = rec.event_offspring
            assert (ks != 1).all()
            assert np.array_equal(
                rec.event_net_mass, (ks - 1) * params.mass_per_particle
            )

    def test_extinction_time(self):
        p = make_params(0.9, 4, 40.0)  # tiny population dies fast
        rec = simulate(dirac(0.0), p, [], RngStream(12, 0))
        if math.isfinite(rec.extinction_time):
            idx = np.searchsorted(rec.step_times, rec.extinction_time)
            assert rec.masses[idx] == 0.0
            assert (rec.masses[idx:] == 0.0).all()
            assert (rec.masses[: idx] > 0.0).all()


class TestEventStatistics:
    def test_martingale_sum_no_events(self):
        p = make_params(0.5, 100, 0.0)
        rec = simulate(dirac(0.0), p, [], RngStream(13, 0))
        assert martingale_event_sum(rec, lambda y: np.ones(y.shape[0]), 0.0) == 0.0

    def test_martingale_sum_telescopes_mass(self, bare_recorders):
        _, _, recs = bare_recorders
        for rec in recs[:20]:
            total = martingale_event_sum(rec, lambda y: np.ones(y.shape[0]), rec.horizon)
            assert total == pytest.approx(rec.masses[-1] - rec.masses[0], abs=1e-12)

    def test_martingale_mean_zero(self, bare_recorders):
        _, _, recs = bare_recorders
        vals = np.array(
            [martingale_event_sum(r, lambda y: g_lambda(1.0, y), 0.5) for r in recs]
        )
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean()) <= 3 * se

    def test_extract_big_jumps_empty(self, bare_recorders):
        _, _, recs = bare_recorders
        rec = recs[0]
        top = rec.event_net_mass.max()
        assert extract_big_jumps(rec, top * 1.01) == []
        with pytest.raises(ValueError):
            extract_big_jumps(rec, 0.0)

    def test_extract_big_jumps_threshold(self, bare_recorders):
        _, _, recs = bare_recorders
        rec = recs[0]
        jumps = extract_big_jumps(rec, 10.5 / 500)
        assert len(jumps) == int(np.sum(rec.event_net_mass > 10.5 / 500))
        for t, x, r in jumps:
            assert r > 10.5 / 500 and 0 <= t <= rec.horizon

    def test_interval_jump_max_synthetic(self):
        # single injected event: (t=0.1, x=0, offspring=51) at N=100
        p = make_params(0.5, 100, 0.2)
        rec = PathRecorder(
            params=p,
            step_times=np.array([0.0, 0.2]),
            masses=np.array([1.0, 1.5]),
            mass_occupation=np.array([0.0, 0.25]),
            occupations={},
            snapshot_times=np.array([0.0, 0.2]),
            snapshots=[np.zeros(100), np.zeros(150)],
            event_times=np.array([0.1]),
            event_locations=np.array([0.0]),
            event_offspring=np.array([51]),
            event_net_mass=np.array([0.5]),
            extinction_time=math.inf,
            final_positions=np.zeros(150),
        )
        assert interval_jump_max(rec, -0.5, 0.5, 0.2) == pytest.approx(0.5)
        assert interval_jump_max(rec, 0.5, 1.0, 0.2) == 0.0
        assert interval_jump_max(rec, -0.5, 0.5, 0.05) == 0.0
        with pytest.raises(ValueError):
            interval_jump_max(rec, 0.5, -0.5, 0.2)

    def test_interval_jump_shape(self, bare_recorders):
        # P(max jump >= b |dx|^{1/(1+beta)}) decreasing in b; the fitted
        # C t^{1/2} X0(1) b^{-(1+beta)} shape calibrated on one width holds
        # on another
        _, params, recs = bare_recorders
        t = 0.5
        power = 1.0 / 1.5

        def exceed_prob(width, b):
            y = b * width**power
            hits = [interval_jump_max(r, -width / 2, width / 2, t) >= y for r in recs]
            return float(np.mean(hits))

        bs = [0.2, 0.4, 0.8, 1.6]
        probs_cal = [exceed_prob(0.4, b) for b in bs]
        assert all(a >= b for a, b in zip(probs_cal, probs_cal[1:]))
        c_fit = max(p * b**1.5 / (t**0.5 * 1.0) for p, b in zip(probs_cal, bs))
        probs_hold = [exceed_prob(0.2, b) for b in bs]
        bound = [min(1.0, 1.5 * c_fit * t**0.5 * b**-1.5) for b in bs]
        assert all(p <= bb for p, bb in zip(probs_hold, bound))


class TestPersistence:
    def test_events_roundtrip(self, tmp_path, bare_recorders):
        _, _, recs = bare_recorders
        rec = recs[0]
        path = tmp_path / "events.txt"
        save_events(rec, path)
        times, locs, ks = load_events(path)
        assert np.array_equal(times, rec.event_times)
        assert np.array_equal(locs, rec.event_locations)
        assert np.array_equal(ks, rec.event_offspring)

    def test_snapshot_csv(self, tmp_path):
        p = make_params(0.5, 50, 0.05)
        rec = simulate(dirac(0.0), p, [], RngStream(14, 0))
        path = tmp_path / "snaps.csv"
        save_snapshots(rec, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "time,particle,x"
        assert len(lines) == 1 + sum(s.shape[0] for s in rec.snapshots)


class TestRecorderAccess:
    def test_occupation_unknown_name(self, bare_recorders):
        _, _, recs = bare_recorders
        with pytest.raises(UsageError):
            recs[0].occupation_at("nope", 0.1)

    def test_time_out_of_range(self, bare_recorders):
        _, _, recs = bare_recorders
        with pytest.raises(UsageError):
            recs[0].total_occupation_at(1.0)

    def test_dim2_simulate(self):
        p = make_params(0.5, 200, 0.1, dim=2, snapshot_stride=5)
        rec = simulate(dirac(0.0), p, [], RngStream(15, 0))
        assert rec.final_positions.shape[1] == 2
        assert rec.event_locations.shape[1] == 2 or rec.event_locations.size == 0
        spread = rec.final_positions.std(axis=0)
        assert (spread > 0).all()
