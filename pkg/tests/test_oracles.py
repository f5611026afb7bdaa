import numpy as np
import pytest

from slotplan import autodiff as ad
from slotplan.autodiff import Tensor
from slotplan.config import ModelConfig
from slotplan.envs import enumerate_tabular
from slotplan.model import init_params
from slotplan.oracles import (
    TabularOracleModel,
    grad_sweep,
    permutation_stress,
    sve_bruteforce,
    value_iteration,
)

from test_envs import grid_cfg


class TestValueIteration:
    def test_single_state_self_loop_geometric_series(self):
        t = np.array([[0]])
        r = np.array([[1.0]])
        sol = value_iteration(t, r, gamma=0.5, tol=1e-12)
        assert sol.values[0] == pytest.approx(2.0, abs=1e-9)

    def test_terminal_only_mdp(self):
        t = np.array([[0, 0], [1, 1]])
        r = np.zeros((2, 2))
        sol = value_iteration(t, r, gamma=0.9)
        np.testing.assert_array_equal(sol.values, [0.0, 0.0])

    def test_closed_form_on_grid(self):
        mdp = enumerate_tabular(grid_cfg(grid_size=3, n_objects=2))
        gamma = 0.9
        sol = value_iteration(mdp.transitions, mdp.rewards, gamma, tol=1e-12)
        for i in range(len(mdp.placements)):
            state = mdp.state_of(i)
            (ar, ac), (tr, tc) = state.agent().pos, state.target().pos
            dist = abs(ar - tr) + abs(ac - tc)
            assert sol.values[i] == pytest.approx(gamma ** (dist - 1), abs=1e-9)
        assert sol.values[mdp.terminal_index] == 0.0

    def test_gamma_one_rejected(self):
        with pytest.raises(ValueError):
            value_iteration(np.array([[0]]), np.array([[1.0]]), gamma=1.0)

    def test_residual_monotone_non_increasing(self):
        mdp = enumerate_tabular(grid_cfg(grid_size=3, n_objects=3))
        gamma = 0.95
        v = np.zeros(mdp.n_states)
        residuals = []
        for _ in range(60):
            q = mdp.rewards + gamma * v[mdp.transitions]
            v_new = q.max(axis=1)
            residuals.append(float(np.abs(v_new - v).max()))
            v = v_new
        assert all(b <= a + 1e-15 for a, b in zip(residuals, residuals[1:]))


class TestSveBruteforce:
    def test_zero_reward_trajectories(self):
        log = [((0.0, 0.0), 2.0, 2), ((0.0,), 4.0, 1)]
        assert sve_bruteforce(log, 0.5) == pytest.approx((0.25 * 2.0 + 0.5 * 4.0) / 2)

    def test_duplicated_trajectory_equals_single(self):
        t = ((1.0, -0.5), 0.7, 2)
        assert sve_bruteforce([t, t], 0.9) == pytest.approx(sve_bruteforce([t], 0.9))

    def test_inconsistent_depth_rejected(self):
        with pytest.raises(ValueError):
            sve_bruteforce([((1.0,), 0.0, 3)], 0.9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sve_bruteforce([], 0.9)


class TestGradSweep:
    def test_linear_model_closed_form(self):
        w = Tensor(np.array([[1.7]]), requires_grad=True)
        x = 0.6

        def loss():
            y = ad.matmul(Tensor([[x]]), w)
            return ad.reduce_sum(ad.mul(y, y))

        report = grad_sweep(loss, [("w", w)], tolerance=1e-10)
        assert report.passed
        analytic = report.checks[0].analytic
        assert analytic == pytest.approx(2 * 1.7 * x * x, abs=1e-10)

    def test_corrupted_adjoint_flagged_by_name(self):
        good = Tensor(np.array([0.4, -0.2]), requires_grad=True)
        bad = Tensor(np.array([0.3]), requires_grad=True)

        def wrong_square(t):
            # deliberately wrong backward rule: d(t^2)/dt reported as 3t
            out = Tensor(t.data**2)
            return ad._emit(out.data, (t,), lambda g: (g * 3.0 * t.data,))

        def loss():
            return ad.add(ad.reduce_sum(ad.mul(good, good)), ad.reduce_sum(wrong_square(bad)))

        report = grad_sweep(loss, [("good", good), ("bad", bad)], tolerance=1e-6)
        assert not report.passed
        assert [c.name for c in report.failures] == ["bad"]
        assert "bad" in report.summary()

    def test_reports_worst_index(self, rng):
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

        def loss():
            return ad.reduce_sum(ad.mul(w, w))

        report = grad_sweep(loss, [("w", w)], tolerance=1e-6)
        assert report.passed
        assert report.checks[0].worst_index in {(i, j) for i in range(2) for j in range(3)}


class TestPermutationStress:
    def test_identity_permutation_zero_deviation(self):
        cfg = ModelConfig(slot_dim=6, hidden=8, action_embed_dim=3)
        params = init_params(0, cfg)
        report = permutation_stress(params, cfg, n_trials=5, seed=1, k=1)
        assert report.max_dynamics_deviation == 0.0
        assert report.max_head_deviation == 0.0
        assert report.passed

    def test_random_params_within_tolerance(self):
        cfg = ModelConfig(slot_dim=8, hidden=12, action_embed_dim=4)
        params = init_params(2, cfg)
        report = permutation_stress(params, cfg, n_trials=100, seed=3, k=4)
        assert report.passed
        assert report.max_dynamics_deviation < 1e-6

    def test_continuous_mode(self):
        cfg = ModelConfig(slot_dim=8, hidden=12, action_embed_dim=4, action_mode="continuous")
        params = init_params(4, cfg)
        report = permutation_stress(params, cfg, n_trials=50, seed=5, k=3)
        assert report.passed


def test_tabular_oracle_model_round_trip():
    mdp = enumerate_tabular(grid_cfg(grid_size=3, n_objects=2))
    sol = value_iteration(mdp.transitions, mdp.rewards, 0.9, tol=1e-12)
    oracle = TabularOracleModel(mdp.transitions, mdp.rewards, sol.values)
    s = 10
    nxt, reward = oracle.step(s, 2)
    assert nxt == mdp.transitions[s, 2]
    assert reward == mdp.rewards[s, 2]
    value, logits = oracle.evaluate(s)
    assert value == sol.values[s]
    np.testing.assert_array_equal(logits, np.zeros(5))
