"""Objective values, gradients, and the negative-sample gradient bounds."""

import numpy as np
import pytest

from lazyrec import autodiff as ad
from lazyrec.autodiff import Tensor
from lazyrec.model import LazyDecoder, ModelConfig, SemanticItem
from lazyrec.policy import (
    OFF_POLICY,
    ObjectiveConfig,
    PolicySample,
    bce_loss,
    ecpo_loss,
    effective_old_prob_gbpo,
    gbpo_loss,
    gradient_bound_check,
    gradient_bound_csv,
    grpo_clip_loss,
    objective_loss,
    objective_stats,
    sequence_prob,
)

ITEM = SemanticItem(0, 0, 0)


def one_token_sample(pi: float, old, advantage: int) -> tuple[Tensor, PolicySample]:
    leaf = Tensor(pi)
    old_t = None if old is None else (old,)
    return leaf, PolicySample(item=ITEM, current=(leaf,), old=old_t, advantage=advantage)


class TestEffectiveOldProb:
    def test_case_table(self):
        assert effective_old_prob_gbpo(0.3, 0.5, +1) == 0.5
        assert effective_old_prob_gbpo(0.7, 0.5, +1) == 0.7
        assert effective_old_prob_gbpo(0.2, None, -1) == 0.8
        assert effective_old_prob_gbpo(0.2, 0.9, -1) == 0.9
        assert effective_old_prob_gbpo(0.4, None, 0) == 0.4


class TestGBPO:
    def test_worked_example_positive(self):
        leaf, s = one_token_sample(0.3, 0.5, +1)
        loss = gbpo_loss([s])
        ad.backward(loss)
        assert abs(float(loss.value) - (-0.6)) < 1e-12
        assert abs(float(leaf.grad) - (-2.0)) < 1e-12

    def test_worked_example_off_policy_negative(self):
        leaf, s = one_token_sample(0.2, OFF_POLICY, -1)
        loss = gbpo_loss([s])
        ad.backward(loss)
        assert abs(float(loss.value) - 0.25) < 1e-12
        assert abs(float(leaf.grad) - 1.25) < 1e-12
        # 1.25 is exactly the negative-class BCE coefficient 1/(1-pi)
        assert float(leaf.grad) == pytest.approx(1 / (1 - 0.2), abs=1e-12)

    def test_zero_advantage_contributes_nothing(self):
        leaf, s = one_token_sample(0.7, 0.5, 0)
        loss = gbpo_loss([s])
        ad.backward(loss)
        assert float(loss.value) == 0.0 and float(leaf.grad) == 0.0

    def test_off_policy_ratio_value_one_but_gradient_flows(self):
        # value pi/max(pi, pi) = 1 for A >= 0, yet dLoss/dpi = -A/pi
        leaf, s = one_token_sample(0.25, OFF_POLICY, +1)
        loss = gbpo_loss([s])
        ad.backward(loss)
        assert float(loss.value) == -1.0
        assert float(leaf.grad) == pytest.approx(-1 / 0.25, abs=1e-12)

    def test_negative_gradient_bound_over_grid(self):
        # |dLoss/dpi| <= 1/(1-pi) for every (pi, pi_old); equality iff pi_old <= 1-pi
        rng = np.random.default_rng(1)
        for _ in range(300):
            pi = float(rng.uniform(0.01, 0.99))
            old = float(rng.uniform(0.01, 0.99))
            leaf, s = one_token_sample(pi, old, -1)
            ad.backward(gbpo_loss([s]))
            coeff = float(leaf.grad)
            assert coeff <= 1 / (1 - pi) + 1e-12
            if old <= 1 - pi:
                assert coeff == pytest.approx(1 / (1 - pi), abs=1e-12)

    def test_ratio_bounded_for_nonnegative_advantage(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pi, old = float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.01, 0.99))
            denom = effective_old_prob_gbpo(pi, old, +1)
            assert pi / denom <= 1.0 + 1e-15

    def test_group_mean_normalization(self):
        l1, s1 = one_token_sample(0.3, 0.5, +1)
        l2, s2 = one_token_sample(0.5, 0.5, 0)
        loss = gbpo_loss([s1, s2])  # zero-advantage sample still counts in G
        assert float(loss.value) == pytest.approx(-0.3, abs=1e-12)


class TestECPO:
    CFG = ObjectiveConfig(method="ecpo", clip_eps=0.2, ecpo_delta=0.1)

    def test_worked_example(self):
        leaf, s = one_token_sample(0.9, 0.5, -1)
        loss = ecpo_loss([s], self.CFG)
        ad.backward(loss)
        # denominator max(0.9/1.3, 0.5) = 0.6923..., ratio 1.3, min(-1.3, -1.2) = -1.3
        assert float(loss.value) == pytest.approx(1.3, abs=1e-12)
        assert float(leaf.grad) == pytest.approx(1.3 / 0.9, abs=1e-12)

    def test_inactive_clip_equals_unclipped(self):
        leaf, s = one_token_sample(0.45, 0.5, +1)
        loss = ecpo_loss([s], self.CFG)
        ad.backward(loss)
        assert float(loss.value) == pytest.approx(-0.9, abs=1e-12)
        assert float(leaf.grad) == pytest.approx(-2.0, abs=1e-12)

    def test_positive_beyond_clip_has_zero_gradient(self):
        leaf, s = one_token_sample(0.75, 0.5, +1)  # ratio 1.5 > 1.2
        loss = ecpo_loss([s], self.CFG)
        ad.backward(loss)
        assert float(loss.value) == pytest.approx(-1.2, abs=1e-12)
        assert float(leaf.grad) == 0.0

    def test_huge_delta_degenerates_to_static_clip(self):
        loose = ObjectiveConfig(method="ecpo", clip_eps=0.2, ecpo_delta=1e9)
        grpo = ObjectiveConfig(method="grpo_clip", clip_eps=0.2)
        for pi, old, a in [(0.9, 0.5, -1), (0.3, 0.5, 1), (0.1, 0.4, -1)]:
            le, se = one_token_sample(pi, old, a)
            lg, sg = one_token_sample(pi, old, a)
            a_loss = ecpo_loss([se], loose)
            b_loss = grpo_clip_loss([sg], grpo)
            ad.backward(a_loss)
            ad.backward(b_loss)
            assert float(a_loss.value) == float(b_loss.value)
            assert float(le.grad) == float(lg.grad)


class TestGRPOClip:
    CFG = ObjectiveConfig(method="grpo_clip", clip_eps=0.2)

    def test_unit_ratio_value_is_negated_mean_advantage(self):
        samples = []
        for pi, a in [(0.3, 1), (0.6, -1), (0.2, 1)]:
            _, s = one_token_sample(pi, OFF_POLICY, a)
            samples.append(s)
        loss = grpo_clip_loss(samples, self.CFG)
        assert float(loss.value) == pytest.approx(-np.mean([1, -1, 1]), abs=1e-12)

    def test_off_policy_negative_coefficient_is_inverse_pi(self):
        leaf, s = one_token_sample(0.01, OFF_POLICY, -1)
        ad.backward(grpo_clip_loss([s], self.CFG))
        assert float(leaf.grad) == pytest.approx(100.0, abs=1e-9)

    def test_clipped_positive_has_zero_gradient(self):
        leaf, s = one_token_sample(0.9, 0.5, +1)  # ratio 1.8 beyond 1.2
        ad.backward(grpo_clip_loss([s], self.CFG))
        assert float(leaf.grad) == 0.0


class TestBCE:
    def test_values_and_gradients(self):
        p = Tensor(0.5)
        loss = bce_loss(p, y=1)
        ad.backward(loss)
        assert float(loss.value) == pytest.approx(np.log(2), abs=1e-12)
        assert float(p.grad) == pytest.approx(-2.0, abs=1e-12)

        p = Tensor(0.5)
        loss = bce_loss(p, y=0)
        ad.backward(loss)
        assert float(loss.value) == pytest.approx(np.log(2), abs=1e-12)
        assert float(p.grad) == pytest.approx(2.0, abs=1e-12)

    def test_confident_true_label_loses_nothing(self):
        assert float(bce_loss(Tensor(1 - 1e-12), y=1).value) == pytest.approx(0.0, abs=1e-9)

    def test_domain(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(0.0), y=1)
        with pytest.raises(ValueError):
            bce_loss(Tensor(0.5), y=2)


class TestGradientBounds:
    def test_reference_points(self):
        rows = {r.pi: r for r in gradient_bound_check([0.2, 0.01, 0.5])}
        assert rows[0.2].gbpo_coeff == pytest.approx(1.25, abs=1e-12)
        assert rows[0.2].bce_coeff == pytest.approx(1.25, abs=1e-12)
        assert rows[0.2].unclipped_coeff == pytest.approx(5.0, abs=1e-12)
        assert rows[0.01].gbpo_coeff == pytest.approx(1.0101010101, abs=1e-9)
        assert rows[0.01].unclipped_coeff == pytest.approx(100.0, abs=1e-9)
        r = rows[0.5]
        assert r.gbpo_coeff == r.bce_coeff == r.unclipped_coeff == pytest.approx(2.0)

    def test_grid_properties(self):
        grid = np.linspace(0.001, 0.999, 1000)
        rows = gradient_bound_check(grid)
        for r in rows:
            assert r.gbpo_coeff == r.gbpo_bound  # exact, not approximate
            assert r.gbpo_coeff <= 2.0
            if r.pi < 0.5:
                assert abs(r.gbpo_coeff - r.bce_coeff) < 1e-9

    def test_csv_emitter(self):
        text = gradient_bound_csv(gradient_bound_check([0.5]))
        assert text.splitlines()[0] == "pi,gbpo_coeff,gbpo_bound,bce_coeff,unclipped_coeff"
        assert len(text.strip().splitlines()) == 2


class TestCrossObjectiveAgreement:
    def test_all_agree_inside_clip_with_dominant_old(self):
        cfg_e = ObjectiveConfig(method="ecpo", clip_eps=0.2, ecpo_delta=0.1)
        cfg_g = ObjectiveConfig(method="grpo_clip", clip_eps=0.2)
        for pi, old, a in [(0.45, 0.5, +1), (0.7, 0.75, -1)]:
            grads, values = [], []
            for fn in (
                lambda s: gbpo_loss([s]),
                lambda s: ecpo_loss([s], cfg_e),
                lambda s: grpo_clip_loss([s], cfg_g),
            ):
                leaf, s = one_token_sample(pi, old, a)
                loss = fn(s)
                ad.backward(loss)
                values.append(float(loss.value))
                grads.append(float(leaf.grad))
            assert len(set(values)) == 1 and len(set(grads)) == 1

    def test_full_zero_advantage_batch_all_methods(self):
        for method in ("gbpo", "ecpo", "grpo_clip"):
            cfg = ObjectiveConfig(method=method)
            leaves, samples = zip(*[one_token_sample(0.3, 0.5, 0) for _ in range(4)])
            loss = objective_loss(list(samples), cfg)
            ad.backward(loss)
            assert float(loss.value) == 0.0
            assert all(float(l.grad) == 0.0 for l in leaves)

    def test_finite_differences_with_frozen_denominators(self):
        # Freeze every stop-gradient term at the evaluation point, then the
        # analytic gradient must match central differences at 1e-6.
        pi0, old, eps, delta = 0.62, 0.5, 0.2, 0.1

        def frozen(method):
            if method == "gbpo":
                denom = max(old, pi0)
                return lambda t: ad.mul(ad.mul(t, Tensor(1.0 / denom)), Tensor(-1.0))
            if method == "ecpo":
                denom = max(pi0 / (1 + eps + delta), old)
            else:
                denom = old
            def f(t):
                ratio = ad.mul(t, Tensor(1.0 / denom))
                clipped = ad.min_with_constant(ad.max_with_constant(ratio, 1 - eps), 1 + eps)
                return ad.mul(ad.minimum(ratio, clipped), Tensor(-1.0))
            return f

        for method in ("gbpo", "ecpo", "grpo_clip"):
            err = ad.finite_difference_check(frozen(method), np.array(pi0), h=1e-7)
            assert err < 1e-6


class TestSequenceProb:
    @pytest.fixture()
    def model(self):
        cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab=8, context_len=4)
        return LazyDecoder(cfg, seed=3)

    def test_product_equals_exp_of_neg_three_gen_loss(self, model):
        rng = np.random.default_rng(0)
        ctx = rng.normal(size=(1, 4, model.cfg.d_context))
        kv = model.context_kv(ctx)
        item = SemanticItem(1, 2, 3)
        trace = model.forward(np.array([item.as_tuple()]), kv)
        p1, p2, p3 = sequence_prob(trace, item)
        joint = float(p1.value) * float(p2.value) * float(p3.value)
        loss = model.gen_loss(trace, np.array([item.as_tuple()]))
        assert joint == pytest.approx(np.exp(-3 * float(loss.value)), rel=1e-10)

    def test_gradient_reaches_parameters(self, model):
        rng = np.random.default_rng(4)
        kv = model.context_kv(rng.normal(size=(1, 4, model.cfg.d_context)))
        item = SemanticItem(2, 2, 2)
        trace = model.forward(np.array([item.as_tuple()]), kv)
        tokens = sequence_prob(trace, item)
        sample = PolicySample(item=item, current=tokens, old=OFF_POLICY, advantage=-1)
        ad.backward(gbpo_loss([sample]))
        g = model.params["block0.cross.wq"].grad
        assert np.abs(g).max() > 0


class TestObjectiveStats:
    def test_clamp_counting_and_fractions(self):
        cfg = ObjectiveConfig(method="gbpo")
        l1, s1 = one_token_sample(1e-12, OFF_POLICY, -1)  # below the floor
        l2, s2 = one_token_sample(0.4, 0.5, +1)
        stats = objective_stats([s1, s2], cfg)
        assert stats["clamp_count"] == 1
        assert stats["positive_fraction"] == 0.5
        assert 0 < stats["mean_ratio"] <= 1.0
