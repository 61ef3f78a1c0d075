from dataclasses import replace
from itertools import count

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from arpod_mpc.dynamics import NX, DockingTarget, RelativeState, rk4_step
from arpod_mpc.sim import (DOCK_TOL_NOMINAL, DOCK_TOL_PERTURBED, Episode, EpisodeError, InitialStateSampler,
                           PerturbationModel, ScenarioConfig, TrajectoryLog, draw_perturbation, monte_carlo,
                           run_episode, run_interleaved, timing_report)

X_D = DockingTarget().x_d


def near_target():
    x = X_D.copy()
    x[:3] = [4e-4, -2e-4, 3e-4]
    x[10:] = [2e-4, -4e-4, 2e-4]
    return RelativeState.from_array(x)


def fake_clock():
    c = count()
    return lambda: float(next(c))


SMALL = ScenarioConfig(x_init=near_target(), N=30, j_max=2, docking_tol=1e-4)


class TestPerturbation:
    def test_zero_scales(self):
        m = PerturbationModel(0.0, 0.0, 0.0, 0.0)
        assert_array_equal(draw_perturbation(m, np.random.default_rng(0)), np.zeros(NX))

    def test_block_scales(self):
        assert_array_equal(PerturbationModel().scales,
                           np.r_[[1e-3] * 3, [1e-6] * 3, [1e-8] * 4, [1e-6] * 3])

    def test_statistics(self):
        rng = np.random.default_rng(42)
        m = PerturbationModel()
        W = np.array([draw_perturbation(m, rng) for _ in range(100_000)])
        std = W.std(axis=0)
        assert_allclose(std[:3], 1e-3, rtol=0.02)
        assert_allclose(std / m.scales, 1.0, rtol=0.02)

    def test_seeded(self):
        m = PerturbationModel()
        a = [draw_perturbation(m, np.random.default_rng(7)) for _ in range(3)]
        b = [draw_perturbation(m, np.random.default_rng(7)) for _ in range(3)]
        assert_array_equal(a, b)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            PerturbationModel(pos=-1.0)


class TestScenarioConfig:
    def test_default_tolerances(self):
        assert ScenarioConfig().tol == DOCK_TOL_NOMINAL
        assert ScenarioConfig(perturbed=True).tol == DOCK_TOL_PERTURBED
        assert ScenarioConfig(docking_tol=0.1, perturbed=True).tol == 0.1

    @pytest.mark.parametrize("kw", [dict(N=0), dict(dt=0.0), dict(dt=float("nan")), dict(docking_tol=0.0),
                                    dict(j_max=0), dict(max_episode_steps=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)

    def test_key_ignores_cap(self):
        assert ScenarioConfig(j_max=2).scenario_key() == ScenarioConfig(j_max=None).scenario_key()
        assert ScenarioConfig(rng_seed=1).scenario_key() != ScenarioConfig(rng_seed=2).scenario_key()

    def test_solver_config_carries_cap(self):
        assert ScenarioConfig(j_max=4).solver_config().j_max == 4


class TestEpisode:
    def test_docked_at_start(self):
        log = run_episode(ScenarioConfig(x_init=RelativeState.from_array(X_D), N=20))
        assert log.docking_step == 0
        assert len(log) == 1
        assert_array_equal(log.inputs[0], 0.0)
        assert log.z_err_inf[0] == 0.0

    def test_small_episode_docks(self):
        log = run_episode(SMALL)
        assert log.docked and log.docking_step >= 5
        assert log.z_err_inf[-1] <= SMALL.tol
        assert all(z > SMALL.tol for z in log.z_err_inf[:-1])
        assert max(log.jk) <= 2
        assert log.k == list(range(len(log)))

    def test_plant_follows_model(self):
        log = run_episode(SMALL)
        for k in range(len(log) - 1):
            assert_array_equal(log.states[k + 1], rk4_step(log.states[k], log.inputs[k], SMALL.params, SMALL.dt))

    def test_inputs_in_bounds(self):
        log = run_episode(replace(SMALL, perturbed=True, docking_tol=1e-9, N=12))
        U = log.inputs
        assert np.all(U >= SMALL.bounds.u_min) and np.all(U <= SMALL.bounds.u_max)

    def test_horizon_ends_without_docking(self):
        log = run_episode(replace(SMALL, docking_tol=1e-12, N=6))
        assert not log.docked
        assert len(log) == 6

    def test_step_budget(self):
        log = run_episode(replace(SMALL, docking_tol=1e-12, max_episode_steps=3))
        assert len(log) == 3 and not log.docked

    def test_perturbed_noise_logged(self):
        cfg = replace(SMALL, perturbed=True, docking_tol=1e-9, N=8)
        log = run_episode(cfg)
        assert len(log.noise) == len(log) - (1 if log.docked else 0)
        rng = np.random.default_rng(cfg.rng_seed)
        for w in log.noise:
            assert_array_equal(w, draw_perturbation(cfg.perturbation, rng))
        assert_allclose(np.linalg.norm(log.states[:, 6:10], axis=1), 1.0, atol=1e-12)

    def test_deterministic_with_fake_clock(self):
        cfg = replace(SMALL, perturbed=True, docking_tol=1e-9, N=8)
        a = run_episode(cfg, clock=fake_clock())
        b = run_episode(cfg, clock=fake_clock())
        assert_array_equal(a.states, b.states)
        assert_array_equal(a.inputs, b.inputs)
        assert a.solve_time == b.solve_time == [1.0] * len(a)

    def test_failure_carries_partial_log(self, monkeypatch):
        import arpod_mpc.sim as sim

        calls = count()
        real = sim.solve

        def flaky(*args, **kw):
            if next(calls) == 2:
                raise FloatingPointError("boom")
            return real(*args, **kw)

        monkeypatch.setattr(sim, "solve", flaky)
        with pytest.raises(EpisodeError) as err:
            run_episode(replace(SMALL, docking_tol=1e-12))
        assert len(err.value.log) == 2
        assert "step 2" in err.value.log.error

    def test_stepper_matches_run(self):
        ep = Episode(SMALL, clock=fake_clock())
        n = 0
        while not ep.step():
            n += 1
        assert ep.step()  # further calls are no-ops
        ref = run_episode(SMALL, clock=fake_clock())
        assert_array_equal(ep.log.states, ref.states)
        assert len(ep.log) == n + 1

    def test_interleaved_matches_separate(self):
        cfgs = [replace(SMALL, j_max=j) for j in (1, 2, None)]
        logs = run_interleaved(cfgs, clock=fake_clock())
        for cfg, log in zip(cfgs, logs):
            ref = run_episode(cfg)
            assert_array_equal(log.states, ref.states)
            assert log.jk == ref.jk


class TestInitialStateSampler:
    def test_ranges(self):
        s = InitialStateSampler()
        rng = np.random.default_rng(1)
        for _ in range(500):
            x = s(rng)
            assert np.all(np.abs(x.dr) <= 2.0) and np.linalg.norm(x.dr) > 0.1
            assert np.all(np.abs(x.dv) <= 5e-3)
            assert abs(np.linalg.norm(x.q_err) - 1.0) < 1e-12 and x.q_err[0] >= 0
            assert np.all(np.abs(x.w_err) <= 1e-2)

    def test_seeded(self):
        s = InitialStateSampler()
        a = s(np.random.default_rng(3)).as_array()
        assert_array_equal(a, s(np.random.default_rng(3)).as_array())


class TestMonteCarlo:
    def test_single_run_equals_episode(self):
        summary = monte_carlo(SMALL, 1, init_sampler=None)
        log = run_episode(SMALL)
        run = summary.runs[0]
        assert run.docking_step == log.docking_step
        assert run.terminal_error == log.terminal_error
        assert summary.mean_terminal_error == log.terminal_error

    def test_seeds_and_order(self):
        sampler = InitialStateSampler(pos_box=5e-4, pos_exclude=1e-4, vel_box=1e-6, omega_box=1e-4)
        cfg = replace(SMALL, rng_seed=10)
        a = monte_carlo(cfg, 3, init_sampler=sampler)
        b = monte_carlo(cfg, 3, init_sampler=sampler, workers=2)
        assert [r.seed for r in a.runs] == [10, 11, 12]
        assert [r.terminal_error for r in a.runs] == [r.terminal_error for r in b.runs]
        assert_array_equal(a.runs[1].x_init, sampler(np.random.default_rng(11)).as_array())

    def test_rejects_zero_runs(self):
        with pytest.raises(ValueError):
            monte_carlo(SMALL, 0)


class TestTimingReport:
    def _log(self, times, key=("s",)):
        log = TrajectoryLog(None, False, 1e-3, scenario=key)
        log.solve_time = list(times)
        return log

    def test_identical_gives_zero(self):
        base = self._log([0.1, 0.4, 0.2])
        (row,) = timing_report({2: self._log([0.1, 0.4, 0.2])}, base)
        assert row.avg_reduction_s == 0.0 and row.max_reduction_pct == 0.0

    def test_reductions(self):
        base = self._log([1.0, 4.0, 1.0])
        (row,) = timing_report({2: self._log([1.0, 1.0])}, base)
        assert row.avg_reduction_s == pytest.approx(1.0)
        assert row.avg_reduction_pct == pytest.approx(50.0)
        assert row.max_reduction_s == pytest.approx(3.0)
        assert row.max_reduction_pct == pytest.approx(75.0)

    def test_empty_caps(self):
        assert timing_report({}, self._log([1.0])) == []

    def test_scenario_mismatch(self):
        with pytest.raises(ValueError):
            timing_report({2: self._log([1.0], key=("other",))}, self._log([1.0]))
