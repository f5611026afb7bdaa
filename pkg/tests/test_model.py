import math

import numpy as np
import pytest

from slotplan import autodiff as ad
from slotplan.autodiff import Tape, Tensor, backward
from slotplan.config import ModelConfig
from slotplan.model import (
    EDGE_EVALS,
    GaussianHead,
    NumericFault,
    WorldModel,
    action_features,
    clamp,
    dynamics_flat,
    dynamics_step,
    gaussian_log_density,
    gaussian_sample,
    init_params,
    parameter_count,
    policy_flat,
    predict_heads,
    reward_flat,
    split_gaussian,
    value_flat,
)

from conftest import check_gradients


def tiny_cfg(mode="discrete", d=4, hidden=6):
    return ModelConfig(slot_dim=d, hidden=hidden, action_embed_dim=3, action_mode=mode)


class TestInit:
    def test_same_seed_bit_identical(self):
        cfg = tiny_cfg()
        a, b = init_params(42, cfg), init_params(42, cfg)
        for (name_a, ta), (name_b, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert name_a == name_b
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_zero_init_heads_give_neutral_outputs(self, rng):
        cfg = tiny_cfg()
        params = init_params(0, cfg)
        slots = rng.normal(size=(3, cfg.slot_dim))
        h = predict_heads(slots, params, cfg)
        assert h.reward == 0.0 and h.value == 0.0
        np.testing.assert_array_equal(h.policy, np.zeros(cfg.n_actions))
        probs = ad.softmax(Tensor(h.policy), axis=0).data
        np.testing.assert_allclose(probs, np.ones(cfg.n_actions) / cfg.n_actions)

    def test_parameter_count_closed_form(self):
        cfg = ModelConfig(slot_dim=16, hidden=64, action_embed_dim=8,
                          action_mode="discrete", n_actions=5)
        d, h, a, p = 16, 64, 8, 5

        def mlp(dims):
            return sum((i + 1) * o for i, o in zip(dims[:-1], dims[1:]))

        hand_count = (
            mlp([2 * d + a, h, h, h])          # dynamics edge
            + mlp([d + a + h, h, h, d])        # dynamics node
            + 3 * mlp([2 * d, h, h, h])        # head edges
            + 3 * mlp([d + h, h, h, h])        # head nodes
            + 2 * mlp([h, h, h, 1])            # reward/value output MLPs
            + mlp([h, h, h, p])                # policy output MLP
            + p * a                            # action embedding table
        )
        assert hand_count == 119103
        assert parameter_count(cfg) == hand_count
        assert init_params(0, cfg).n_parameters() == hand_count

    def test_continuous_policy_width(self):
        cfg = tiny_cfg("continuous")
        params = init_params(0, cfg)
        assert params.head_pol.weights[-1].shape[1] == 2 * cfg.action_dim
        assert params.action_embed.shape == (cfg.action_dim, cfg.action_embed_dim)


class TestStructure:
    def test_single_slot_never_reads_edge_mlps(self):
        cfg = tiny_cfg()
        params = init_params(1, cfg)
        slots = np.random.default_rng(0).normal(size=(1, cfg.slot_dim))
        EDGE_EVALS.reset()
        dynamics_step(slots, 2, params, cfg)
        predict_heads(slots, params, cfg)
        assert EDGE_EVALS.count == 0

    def test_edge_evaluations_scale_quadratically(self, rng):
        cfg = tiny_cfg()
        params = init_params(1, cfg)
        for k in (2, 3, 5):
            slots = rng.normal(size=(k, cfg.slot_dim))
            EDGE_EVALS.reset()
            dynamics_step(slots, 0, params, cfg)
            assert EDGE_EVALS.count == k * (k - 1)
            EDGE_EVALS.reset()
            predict_heads(slots, params, cfg)
            assert EDGE_EVALS.count == 3 * k * (k - 1)  # one fully connected pass per head

    def test_dynamics_equivariance(self, rng):
        cfg = tiny_cfg()
        params = init_params(3, cfg)
        slots = rng.normal(size=(4, cfg.slot_dim))
        perm = rng.permutation(4)
        out = dynamics_step(slots, 1, params, cfg)
        out_perm = dynamics_step(slots[perm], 1, params, cfg)
        assert np.abs(out[perm] - out_perm).max() < 1e-6

    def test_head_invariance(self, rng):
        cfg = tiny_cfg()
        params = init_params(4, cfg)
        # break the zero init so outputs are informative
        for _, t in params.named_tensors():
            if not t.data.any():
                t.data = rng.normal(size=t.data.shape)
        slots = rng.normal(size=(5, cfg.slot_dim))
        perm = rng.permutation(5)
        h, hp = predict_heads(slots, params, cfg), predict_heads(slots[perm], params, cfg)
        assert abs(h.reward - hp.reward) < 1e-6
        assert abs(h.value - hp.value) < 1e-6
        assert np.abs(h.policy - hp.policy).max() < 1e-6

    def test_fast_and_taped_paths_bit_identical(self, rng):
        for mode in ("discrete", "continuous"):
            cfg = tiny_cfg(mode)
            params = init_params(7, cfg)
            slots = Tensor(rng.normal(size=(6, cfg.slot_dim)))  # batch 2, k 3
            actions = [0, 3] if mode == "discrete" else rng.uniform(-0.1, 0.1, (2, 2))
            fast = [
                dynamics_flat(slots, action_features(actions, params, cfg), 2, 3, params).data,
                reward_flat(slots, 2, 3, params).data,
                value_flat(slots, 2, 3, params).data,
                policy_flat(slots, 2, 3, params).data,
            ]
            with Tape():
                taped = [
                    dynamics_flat(slots, action_features(actions, params, cfg), 2, 3, params).data,
                    reward_flat(slots, 2, 3, params).data,
                    value_flat(slots, 2, 3, params).data,
                    policy_flat(slots, 2, 3, params).data,
                ]
            for f, t in zip(fast, taped):
                np.testing.assert_array_equal(f, t)

    def test_nan_raises_numeric_fault_with_params(self, rng):
        cfg = tiny_cfg()
        params = init_params(0, cfg)
        params.node_dyn.weights[0].data[0, 0] = np.nan
        with pytest.raises(NumericFault) as exc:
            dynamics_step(rng.normal(size=(2, cfg.slot_dim)), 0, params, cfg)
        assert exc.value.params is params


class TestGradients:
    def test_dynamics_mse_gradient(self, rng):
        cfg = tiny_cfg(d=4, hidden=5)
        params = init_params(9, cfg)
        slots = Tensor(rng.normal(size=(2, 4)))
        target = rng.normal(size=(2, 4))

        def loss():
            out = dynamics_flat(slots, action_features([1], params, cfg), 1, 2, params)
            d = ad.sub(out, Tensor(target))
            return ad.reduce_sum(ad.mul(d, d))

        check_gradients(loss, params.tensors(), tol=1e-4)

    def test_heads_joint_gradient(self, rng):
        cfg = tiny_cfg(d=4, hidden=5)
        params = init_params(10, cfg)
        for _, t in params.named_tensors():
            if not t.data.any():
                t.data = rng.normal(scale=0.3, size=t.data.shape)
        slots = Tensor(rng.normal(size=(3, 4)))
        pi = rng.dirichlet(np.ones(cfg.n_actions))

        def loss():
            r = reward_flat(slots, 1, 3, params)
            v = value_flat(slots, 1, 3, params)
            p = policy_flat(slots, 1, 3, params)
            ce = ad.scale(ad.reduce_sum(ad.mul(ad.log(ad.softmax(p, axis=1)), Tensor(pi.reshape(1, -1)))), -1.0)
            return ad.add(ad.add(ad.reduce_sum(ad.mul(r, r)), ad.reduce_sum(ad.mul(v, v))), ce)

        check_gradients(loss, params.tensors(), tol=1e-4)

    def test_three_step_unrolled_chain_gradient(self, rng):
        cfg = tiny_cfg(d=4, hidden=4)
        params = init_params(11, cfg)
        slots = Tensor(rng.normal(size=(2, 4)))
        target = rng.normal(size=(2, 4))
        actions = [0, 2, 4]

        def loss():
            cur = slots
            for a in actions:
                cur = dynamics_flat(cur, action_features([a], params, cfg), 1, 2, params)
            d = ad.sub(cur, Tensor(target))
            return ad.reduce_sum(ad.mul(d, d))

        check_gradients(loss, params.tensors(), tol=1e-4)


class TestGaussian:
    def test_log_density_at_mean_is_normalizer(self):
        d = 2
        mean = Tensor(np.zeros((1, d)))
        log_std = Tensor(np.zeros((1, d)))
        lp = gaussian_log_density(mean, log_std, np.zeros((1, d)), bound=1.0)
        assert lp.data[0] == pytest.approx(-(d / 2) * math.log(2 * math.pi))

    def test_sample_mean_converges(self):
        head = GaussianHead(mean=np.array([0.03, -0.02]), log_std=np.log([0.05, 0.08]))
        samples = gaussian_sample(head, 100_000, np.random.default_rng(3), bound=0.1)
        assert np.abs(samples.mean(axis=0) - head.mean).max() < 0.01
        assert np.abs(samples).max() <= 0.1

    def test_log_density_gradient(self, rng):
        mean = Tensor(rng.normal(scale=0.02, size=(3, 2)), requires_grad=True)
        log_std = Tensor(rng.normal(scale=0.1, size=(3, 2)), requires_grad=True)
        actions = rng.uniform(-0.1, 0.1, size=(3, 2))

        def loss():
            return ad.reduce_sum(gaussian_log_density(mean, log_std, actions, bound=0.1))

        check_gradients(loss, [mean, log_std], tol=1e-5)

    def test_out_of_bounds_query_clamped_and_counted(self):
        from slotplan.model import OOB_DENSITY_QUERIES

        mean = Tensor(np.zeros((1, 2)))
        log_std = Tensor(np.zeros((1, 2)))
        OOB_DENSITY_QUERIES.reset()
        outside = gaussian_log_density(mean, log_std, np.array([[5.0, 0.0]]), bound=0.1)
        assert OOB_DENSITY_QUERIES.count == 1
        at_edge = gaussian_log_density(mean, log_std, np.array([[0.1, 0.0]]), bound=0.1)
        np.testing.assert_allclose(outside.data, at_edge.data)

    def test_split_gaussian_clamps_log_std(self, rng):
        cfg = tiny_cfg("continuous")
        raw = Tensor(np.array([[0.01, -0.02, -9.0, 7.0]]))
        mean, log_std = split_gaussian(raw, cfg)
        np.testing.assert_allclose(mean.data, [[0.01, -0.02]])
        np.testing.assert_allclose(log_std.data, [[cfg.logstd_min, cfg.logstd_max]])

    def test_clamp_gradient_zero_outside(self):
        x = Tensor(np.array([-10.0, 0.0, 10.0]), requires_grad=True)
        with Tape():
            y = ad.reduce_sum(clamp(x, -5.0, 2.0))
        backward(y)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestWorldModel:
    def test_step_and_evaluate_shapes(self, rng):
        cfg = tiny_cfg()
        params = init_params(1, cfg)
        wm = WorldModel(params, cfg)
        latent = wm.initial(rng.normal(size=(3, cfg.slot_dim)))
        nxt, reward = wm.step(latent, 2)
        assert nxt.shape == latent.shape and isinstance(reward, float)
        value, logits = wm.evaluate(nxt)
        assert isinstance(value, float) and logits.shape == (cfg.n_actions,)

    def test_continuous_evaluate_returns_gaussian(self, rng):
        cfg = tiny_cfg("continuous")
        params = init_params(1, cfg)
        wm = WorldModel(params, cfg)
        value, head = wm.evaluate(rng.normal(size=(3, cfg.slot_dim)))
        assert isinstance(head, GaussianHead)
        assert head.mean.shape == (2,) and head.log_std.shape == (2,)
