from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from arpod_mpc.dynamics import NU, NX, REFERENCE_PARAMS, REFERENCE_STATE, DockingTarget, rk4_step
from arpod_mpc.ocp import (NZ, CostWeights, DecisionVector, DimensionError, HorizonExhausted, InputBounds,
                           build_instance, eval_constraint_jacobian, eval_constraints, eval_cost, eval_cost_gradient,
                           rollout, trajectory, variable_bounds, warm_start_from)

X_D = DockingTarget().x_d


def config(N, **kw):
    base = dict(params=REFERENCE_PARAMS, N=N, dt=3.0, weights=CostWeights(), bounds=InputBounds())
    base.update(kw)
    return SimpleNamespace(**base)


def table_x0():
    return REFERENCE_STATE.as_array()


def random_decision(inst, rng, spread=1.0):
    M = inst.stages
    U = rng.uniform(-1e-3, 1e-3, (M, NU))
    X = rollout(inst.x0, U, inst.params, inst.dt)
    X = X + spread * rng.normal(0, 1, X.shape) * np.r_[0.1 * np.ones(3), 1e-4 * np.ones(3), 0.05 * np.ones(4),
                                                         1e-3 * np.ones(3)]
    return DecisionVector.from_blocks(U, X, inst.k)


class TestBuildInstance:
    def test_full_horizon(self):
        inst = build_instance(table_x0(), 0, config(1000))
        assert inst.stages == 1000
        assert inst.n_vars == 19000

    def test_last_stage(self):
        assert build_instance(table_x0(), 999, config(1000)).stages == 1

    def test_exhausted(self):
        with pytest.raises(HorizonExhausted):
            build_instance(table_x0(), 1000, config(1000))

    def test_shrinks_by_one(self):
        cfg = config(50)
        assert build_instance(X_D, 10, cfg).stages - build_instance(X_D, 11, cfg).stages == 1

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            build_instance(X_D, 0, config(10, dt=0.0))
        with pytest.raises(DimensionError):
            build_instance(np.zeros(12), 0, config(10))


class TestCost:
    def test_target_trajectory_is_free(self):
        inst = build_instance(X_D, 0, config(5))
        d = DecisionVector.from_blocks(np.zeros((5, NU)), np.tile(X_D, (5, 1)), 0)
        assert eval_cost(inst, d) == 0.0

    def test_single_stage_position_offset(self):
        x0 = X_D.copy()
        x0[0] = 1.0
        inst = build_instance(x0, 0, config(1))
        d = DecisionVector.from_blocks(np.zeros((1, NU)), X_D[None, :], 0)
        assert eval_cost(inst, d) == pytest.approx(10.0, rel=1e-15)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        inst = build_instance(table_x0(), 3, config(10))
        d = random_decision(inst, rng)
        U, X = d.controls, np.vstack([inst.x0, d.raw_states])
        Q, R = np.diag(inst.weights.Q), np.diag(inst.weights.R)
        ref = 0.0
        for i in range(inst.stages):
            e = X[i] - X_D
            ref += e @ Q @ e + U[i] @ R @ U[i]
        assert eval_cost(inst, d) == pytest.approx(ref, rel=1e-10)

    def test_dimension_mismatch(self):
        inst = build_instance(X_D, 0, config(5))
        with pytest.raises(DimensionError):
            eval_cost(inst, DecisionVector(np.zeros(4 * NZ), 0))

    def test_weights_validation(self):
        with pytest.raises(DimensionError):
            CostWeights(Q=np.ones(12))
        with pytest.raises(ValueError):
            CostWeights(R=-np.ones(6))

    def test_default_weights(self):
        w = CostWeights()
        assert_array_equal(w.Q, np.r_[[10.0] * 3, [1e-4] * 3, [1e8] * 7])
        assert_array_equal(w.R, np.r_[[1e3] * 3, [1e10] * 3])


class TestConstraints:
    def test_equilibrium_rollout(self):
        inst = build_instance(X_D, 0, config(8))
        d = warm_start_from(None, inst)
        assert_allclose(eval_constraints(inst, d), 0.0, atol=1e-12)

    def test_table_rollout(self):
        inst = build_instance(table_x0(), 0, config(8))
        r = eval_constraints(inst, warm_start_from(None, inst))
        assert_array_equal(r[:-NX], 0.0)
        assert np.abs(r[-NX:]).max() > 0.1

    def test_one_block_touches_two_defects(self):
        inst = build_instance(table_x0(), 0, config(6))
        d = warm_start_from(None, inst)
        base = eval_constraints(inst, d)
        d2 = d.copy()
        d2.raw_states[2, 0] += 1e-3  # x_3
        changed = np.abs(eval_constraints(inst, d2) - base).reshape(-1, NX).max(axis=1) > 0
        assert list(np.flatnonzero(changed)) == [2, 3]

    def test_feasible_iff_rollout(self):
        rng = np.random.default_rng(5)
        inst = build_instance(table_x0(), 0, config(10))
        U = rng.uniform(-1e-3, 1e-3, (10, NU))
        X = rollout(inst.x0, U, inst.params, inst.dt)
        d = DecisionVector.from_blocks(U, X, 0)
        assert np.abs(eval_constraints(inst, d)[:-NX]).max() <= 1e-10
        d.raw_states[4, 1] += 1e-6
        assert np.abs(eval_constraints(inst, d)[:-NX]).max() > 1e-10

    def test_bounds_are_box_not_residuals(self):
        inst = build_instance(table_x0(), 0, config(4))
        lo, hi = variable_bounds(inst)
        assert lo.size == hi.size == inst.n_vars
        blk_lo = lo.reshape(4, NZ)
        assert_array_equal(blk_lo[:, :NU], np.tile(inst.bounds.u_min, (4, 1)))
        assert np.all(np.isinf(blk_lo[:, NU:]))
        assert eval_constraints(inst, warm_start_from(None, inst)).size == 5 * NX


class TestDerivatives:
    @pytest.mark.parametrize("N", [3, 5, 10])
    def test_cost_gradient_central_differences(self, N):
        rng = np.random.default_rng(N)
        inst = build_instance(table_x0(), 0, config(N))
        for _ in range(20):
            d = random_decision(inst, rng)
            g = eval_cost_gradient(inst, d)
            v = d.data
            h = 1e-6 * np.maximum(1.0, np.abs(v))
            fd = np.empty_like(v)
            for i in range(v.size):
                vp, vm = v.copy(), v.copy()
                vp[i] += h[i]
                vm[i] -= h[i]
                fd[i] = (eval_cost(inst, DecisionVector(vp, 0)) - eval_cost(inst, DecisionVector(vm, 0))) / (2 * h[i])
            scale = max(1.0, np.abs(g).max())
            assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * scale)

    @pytest.mark.parametrize("N", [3, 5, 10])
    def test_constraint_jacobian_central_differences(self, N):
        rng = np.random.default_rng(100 + N)
        inst = build_instance(table_x0(), 0, config(N))
        for _ in range(20):
            d = random_decision(inst, rng, spread=0.3)
            Jc = eval_constraint_jacobian(inst, d).toarray()
            v = d.data
            for i in range(v.size):
                h = 1e-6 * max(1.0, abs(v[i]))
                vp, vm = v.copy(), v.copy()
                vp[i] += h
                vm[i] -= h
                fd = (eval_constraints(inst, DecisionVector(vp, 0)) - eval_constraints(inst, DecisionVector(vm, 0)))
                fd /= 2 * h
                assert_allclose(Jc[:, i], fd, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd).max()))

    def test_gradient_zero_at_target(self):
        inst = build_instance(X_D, 0, config(4))
        d = DecisionVector.from_blocks(np.zeros((4, NU)), np.tile(X_D, (4, 1)), 0)
        assert_array_equal(eval_cost_gradient(inst, d), 0.0)

    def test_jacobian_block_pattern(self):
        inst = build_instance(table_x0(), 0, config(5))
        Jc = eval_constraint_jacobian(inst, warm_start_from(None, inst)).toarray()
        for r in range(6):
            for c in range(5):
                blk = Jc[r * NX:(r + 1) * NX, c * NZ:(c + 1) * NZ]
                if r < 5:
                    allowed = c in (r - 1, r)
                else:
                    allowed = c == 4
                if not allowed:
                    assert not blk.any(), (r, c)


class TestDecisionVector:
    def test_layout(self):
        U = np.arange(12.0).reshape(2, NU)
        X = np.tile(X_D, (2, 1))
        d = DecisionVector.from_blocks(U, X, 7)
        assert d.data.size == 2 * NZ
        assert_array_equal(d.u(8), U[1])
        assert_array_equal(d.x(9), X_D)
        with pytest.raises(IndexError):
            d.x(7)

    def test_quaternion_normalized_on_extraction_only(self):
        X = np.tile(X_D, (1, 1))
        X[0, 6] = 2.0
        d = DecisionVector.from_blocks(np.zeros((1, NU)), X, 0)
        assert d.raw_states[0, 6] == 2.0
        assert d.x(1)[6] == 1.0
        assert d.states()[0, 6] == 1.0

    def test_bad_length(self):
        with pytest.raises(DimensionError):
            DecisionVector(np.zeros(20), 0)


class TestWarmStart:
    def test_cold_start_is_rollout(self):
        inst = build_instance(table_x0(), 0, config(6))
        d = warm_start_from(None, inst)
        assert_array_equal(d.controls, 0.0)
        x = inst.x0
        for i in range(6):
            x = rk4_step(x, np.zeros(NU), inst.params, inst.dt)
            assert_array_equal(d.raw_states[i], x)

    def test_shift(self):
        cfg = config(6)
        prev = warm_start_from(None, build_instance(table_x0(), 0, cfg))
        inst = build_instance(prev.x(1), 1, cfg)
        d = warm_start_from(prev, inst)
        assert d.stages == prev.stages - 1
        assert_array_equal(d.data, prev.data[NZ:])
        U, X = trajectory(inst, d)
        assert X.shape == (6, NX)

    def test_shift_mismatch(self):
        cfg = config(6)
        prev = warm_start_from(None, build_instance(table_x0(), 0, cfg))
        with pytest.raises(DimensionError):
            warm_start_from(prev, build_instance(table_x0(), 2, cfg))
