"""
Tests for the Bellman losses, the GRPO surrogate and reward transforms
"""

import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from errors import ContractViolationError, NumericAbortError
from objectives import (
    ObjectiveConfig,
    analytic_gradient,
    apply_reward_transform,
    bellman_errors,
    clipped_surrogate,
    evaluate_objective,
    group_advantages,
    grpo_loss,
    objective_fn,
    regression_loss,
    residual_decompose,
    reval_loss,
    tbrm_loss,
    transform_rewards,
)
from oracles import random_tiny_task
from policy_engine import (
    ReferenceSnapshot,
    TabularPolicy,
    batch_trajectory_terms,
    finite_diff_check,
    grad,
)
from token_mdp import Constant, State, rollout_batch, spawn_seeds


@pytest.fixture
def uniform_ref(two_token_mdp):
    return ReferenceSnapshot.take(TabularPolicy.for_mdp(two_token_mdp))


@pytest.fixture
def rewarded_action(make_trajectory):
    """Action 0 on prompt [0] with reward 1"""
    return make_trajectory((0,), (0,), reward=1.0)


def _policy_with(mdp, row):
    policy = TabularPolicy.for_mdp(mdp)
    policy.set_logits(State((0,)), row)
    return policy


def _random_instance(seed, n=6):
    """Random tiny task, random reference and policy, a behaviour batch with rewards"""
    mdp = random_tiny_task(seed)
    ref = ReferenceSnapshot.take(TabularPolicy.for_mdp(mdp, scale=1.0, seed=seed))
    policy = TabularPolicy.for_mdp(mdp, scale=1.0, seed=seed + 1000)
    prompts = [p for p in mdp.prompt_states for _ in range(n)]
    behaviour = TabularPolicy.for_mdp(mdp, scale=0.5, seed=seed + 2000)
    batch = rollout_batch(mdp, behaviour, prompts, spawn_seeds(seed, len(prompts)))
    # reward variety independent of the verifier
    batch = [t.model_copy(update={"training_reward": float(i % 2)}) for i, t in enumerate(batch)]
    return mdp, ref, policy, batch


class TestRevalLoss:
    """Shaped trajectory Bellman residual"""

    def test_worked_instance(self, two_token_mdp, uniform_ref, rewarded_action):
        policy = _policy_with(two_token_mdp, [0.5, 0.0])
        result = reval_loss(policy, uniform_ref, [rewarded_action], ObjectiveConfig(beta=1.0))
        assert result.loss == pytest.approx(0.25)
        residual = result.residuals[0]
        assert residual.bellman_error == pytest.approx(-0.5)
        assert residual.delta == pytest.approx(0.5)
        assert residual.reward_term == pytest.approx(1.0)
        assert residual.value_gap == pytest.approx(0.280930, abs=1e-6)
        assert residual.log_ratio == pytest.approx(0.219070, abs=1e-6)

    def test_soft_optimal_fixed_point(self, two_token_mdp, uniform_ref, rewarded_action):
        policy = _policy_with(two_token_mdp, [1.0, 0.0])
        result = reval_loss(policy, uniform_ref, [rewarded_action], ObjectiveConfig(beta=1.0))
        assert result.loss == pytest.approx(0.0, abs=1e-20)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(100))
    def test_calibrated_initialization(self, seed):
        mdp, ref, _, _ = _random_instance(seed)
        policy = ref.policy.clone()
        batch = rollout_batch(mdp, policy, mdp.prompt_states * 4, spawn_seeds(seed, 4 * len(mdp.prompts)))
        batch = [t.model_copy(update={"training_reward": 0.0}) for t in batch]
        cfg = ObjectiveConfig(beta=0.1)
        result = reval_loss(policy, ref, batch, cfg)
        assert result.loss == 0.0
        assert result.grad_norm <= 1e-10
        assert regression_loss(policy, ref, batch, cfg).loss == 0.0

        values = batch_trajectory_terms(ref.policy, batch)[1]
        tbrm = tbrm_loss(policy, ref, batch, cfg)
        if float(values.abs().min()) > 1e-3:
            assert tbrm.loss > 0
            assert tbrm.grad_norm > 1e-6

    @pytest.mark.parametrize("seed", range(6))
    def test_autodiff_matches_closed_form(self, seed):
        _, ref, policy, batch = _random_instance(seed)
        cfg = ObjectiveConfig(beta=0.5)
        autodiff = reval_loss(policy, ref, batch, cfg).gradient.values
        np.testing.assert_allclose(autodiff, analytic_gradient(policy, ref, batch, cfg), atol=1e-8)

    def test_dropping_value_term_changes_gradient(self):
        _, ref, policy, batch = _random_instance(3)
        cfg = ObjectiveConfig(beta=0.5)
        full = analytic_gradient(policy, ref, batch, cfg)
        simplified = analytic_gradient(policy, ref, batch, cfg, include_value_term=False)
        assert np.abs(full - simplified).max() > 1e-6

    def test_residuals_match_decomposition(self):
        _, ref, policy, batch = _random_instance(5)
        cfg = ObjectiveConfig(beta=0.3)
        result = reval_loss(policy, ref, batch, cfg)
        for residual, traj in zip(result.residuals, batch):
            single = residual_decompose(policy, ref, traj, cfg)
            assert single.delta == pytest.approx(residual.delta, abs=1e-12)
            assert single.delta == pytest.approx(
                single.reward_term - single.value_gap - single.log_ratio, abs=1e-12
            )

    def test_empty_batch(self, uniform_ref, two_token_mdp):
        with pytest.raises(ContractViolationError):
            reval_loss(TabularPolicy.for_mdp(two_token_mdp), uniform_ref, [], ObjectiveConfig())

    def test_non_finite_residual_names_trajectory(self, two_token_mdp, uniform_ref, make_trajectory):
        bad = make_trajectory((0,), (1,), traj_id=42).model_copy(update={"training_reward": float("inf")})
        with pytest.raises(NumericAbortError) as info:
            reval_loss(TabularPolicy.for_mdp(two_token_mdp), uniform_ref, [bad], ObjectiveConfig())
        assert info.value.traj_id == 42
        assert info.value.diagnostic["kind"] == "reval"


class TestTbrmAndRegression:
    def test_tbrm_not_calibrated(self, two_token_mdp, uniform_ref, make_trajectory):
        traj = make_trajectory((0,), (1,), reward=0.0)
        policy = uniform_ref.policy.clone()
        result = tbrm_loss(policy, uniform_ref, [traj], ObjectiveConfig(beta=1.0))
        assert result.residuals[0].bellman_error == pytest.approx(math.log(2))
        assert result.loss == pytest.approx(0.480453, abs=1e-6)
        assert result.grad_norm > 0

    def test_tbrm_reward_offsets_value(self, two_token_mdp, uniform_ref, rewarded_action):
        policy = uniform_ref.policy.clone()
        result = tbrm_loss(policy, uniform_ref, [rewarded_action], ObjectiveConfig(beta=1.0 / math.log(2)))
        assert result.loss == pytest.approx(0.0, abs=1e-20)

    @pytest.mark.parametrize("seed", range(5))
    def test_unshaped_minus_shaped_is_reference_value(self, seed):
        _, ref, policy, batch = _random_instance(seed)
        cfg = ObjectiveConfig(beta=0.2)
        with torch.no_grad():
            gap = bellman_errors(policy, ref, batch, cfg, kind="tbrm") - bellman_errors(
                policy, ref, batch, cfg, kind="reval"
            )
        _, v_ref = batch_trajectory_terms(ref.policy, batch)
        np.testing.assert_allclose(gap.numpy(), v_ref.numpy(), atol=1e-12)

    def test_regression_on_mean_normalized_rewards(self, two_token_mdp, uniform_ref, make_trajectory):
        cfg = ObjectiveConfig(kind="regression", beta=0.02, reward_transform="mean_normalized", group_size=2)
        batch = apply_reward_transform(
            [make_trajectory((0,), (0,), reward=1.0, traj_id=0), make_trajectory((0,), (1,), reward=0.0, traj_id=1)],
            cfg,
        )
        result = regression_loss(uniform_ref.policy.clone(), uniform_ref, batch, cfg)
        assert [r.bellman_error for r in result.residuals] == pytest.approx([-25.0, 25.0])
        assert result.loss == pytest.approx(625.0)

    def test_grad_clip_defaults(self):
        assert ObjectiveConfig(kind="regression").effective_grad_clip == 10.0
        assert ObjectiveConfig(kind="reval").effective_grad_clip is None
        assert ObjectiveConfig(kind="regression", grad_clip_norm=0.0).effective_grad_clip is None
        assert ObjectiveConfig(kind="reval", grad_clip_norm=2.5).effective_grad_clip == 2.5


class TestGradientChecks:
    """Autograd gradients of every objective against central differences"""

    @staticmethod
    def _grpo_instance(seed, n=6):
        # behaviour close to the policy keeps every ratio away from the clip edges
        mdp, ref, policy, _ = _random_instance(seed, n)
        noise = np.random.default_rng(seed).normal(0.0, 0.02, size=policy.num_params)
        behaviour = TabularPolicy(policy.vocab_size, policy.contexts, theta=policy.params() + noise)
        prompts = [p for p in mdp.prompt_states for _ in range(n)]
        batch = rollout_batch(mdp, behaviour, prompts, spawn_seeds(seed, len(prompts)))
        return ref, policy, batch, ObjectiveConfig(kind="grpo", group_size=n)

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", ["reval", "tbrm", "regression", "grpo"])
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_finite_differences(self, kind, seed):
        if kind == "grpo":
            ref, policy, batch, cfg = self._grpo_instance(seed)
        else:
            _, ref, policy, batch = _random_instance(seed)
            cfg = ObjectiveConfig(kind=kind, beta=0.5)
        report = finite_diff_check(
            policy,
            objective_fn(policy, ref, batch, cfg),
            gradient=evaluate_objective(policy, ref, batch, cfg).gradient.values,
            rel_tol=1e-4,
        )
        assert report.passed, report


class TestRewardTransforms:
    def test_zero_one(self):
        assert transform_rewards([1, 0], ObjectiveConfig()).tolist() == [1.0, 0.0]

    def test_mean_normalized(self):
        cfg = ObjectiveConfig(reward_transform="mean_normalized", group_size=4)
        assert transform_rewards([1, 0, 0, 1], cfg).tolist() == [0.5, -0.5, -0.5, 0.5]

    def test_plus_minus_one(self):
        cfg = ObjectiveConfig(reward_transform="plus_minus_one")
        assert transform_rewards([1, 0], cfg).tolist() == [1.0, -1.0]

    def test_groups_must_divide(self):
        cfg = ObjectiveConfig(reward_transform="mean_normalized", group_size=4)
        with pytest.raises(ContractViolationError):
            transform_rewards([1, 0, 1], cfg)

    def test_rule_reward_is_kept(self, make_trajectory):
        cfg = ObjectiveConfig(reward_transform="plus_minus_one")
        (traj,) = apply_reward_transform([make_trajectory((0,), (0,), reward=0.0)], cfg)
        assert traj.rule_reward == 0.0
        assert traj.training_reward == -1.0


class TestGrpo:
    def test_group_centering(self):
        adv = group_advantages([1, 0, 0, 1], group_size=4, normalize_by_std=False)
        assert adv.tolist() == [0.5, -0.5, -0.5, 0.5]

    def test_group_standardization(self):
        adv = group_advantages([1, 0, 0, 1], group_size=4)
        np.testing.assert_allclose(adv, np.array([1, -1, -1, 1]) * 0.5 / math.sqrt(1 / 3))

    def test_degenerate_group_has_zero_advantage(self):
        adv = group_advantages([1, 1, 1, 1, 0, 1, 0, 1], group_size=4)
        assert adv[:4].tolist() == [0.0, 0.0, 0.0, 0.0]
        assert np.abs(adv[4:]).min() > 0

    def test_single_sample_groups(self):
        assert group_advantages([1, 0, 1], group_size=1).tolist() == [0.0, 0.0, 0.0]

    def test_upper_clip(self):
        cfg = ObjectiveConfig(kind="grpo")
        value, clipped = clipped_surrogate(
            torch.tensor([1.5], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), cfg
        )
        assert float(value[0]) == pytest.approx(1.28)
        assert bool(clipped[0])

    def test_lower_clip_with_negative_advantage(self):
        cfg = ObjectiveConfig(kind="grpo")
        value, clipped = clipped_surrogate(
            torch.tensor([0.5], dtype=torch.float64), torch.tensor([-1.0], dtype=torch.float64), cfg
        )
        assert float(value[0]) == pytest.approx(-0.8)
        assert bool(clipped[0])

    def test_clip_order_validated(self):
        with pytest.raises(ValidationError):
            ObjectiveConfig(clip_low=0.3, clip_high=0.2)

    def test_first_update_is_vanilla_policy_gradient(self, checksum_mdp):
        policy = TabularPolicy.for_mdp(checksum_mdp, scale=1.0, seed=0)
        prompts = [p for p in checksum_mdp.prompt_states for _ in range(4)]
        batch = rollout_batch(checksum_mdp, policy, prompts, spawn_seeds(2, len(prompts)))
        cfg = ObjectiveConfig(kind="grpo", group_size=4)
        result = grpo_loss(policy, batch, cfg)

        adv = torch.as_tensor(group_advantages([t.rule_reward for t in batch], 4))
        tokens = sum(t.num_sampled for t in batch)
        expected = grad(
            policy, lambda theta: -(adv * batch_trajectory_terms(policy, batch, theta)[0]).sum() / tokens
        )
        np.testing.assert_allclose(result.gradient.values, expected.values, atol=1e-10)
        assert result.clipped_fraction == 0.0

    def test_batch_must_split_into_groups(self, checksum_mdp):
        policy = TabularPolicy.for_mdp(checksum_mdp)
        batch = rollout_batch(checksum_mdp, policy, checksum_mdp.prompt_states, spawn_seeds(0, 2))
        with pytest.raises(ContractViolationError):
            grpo_loss(policy, batch, ObjectiveConfig(kind="grpo", group_size=4))

    def test_dispatch(self, checksum_mdp):
        policy = TabularPolicy.for_mdp(checksum_mdp, scale=1.0, seed=1)
        ref = ReferenceSnapshot.take(policy)
        batch = rollout_batch(checksum_mdp, policy, checksum_mdp.prompt_states * 2, spawn_seeds(0, 4))
        assert evaluate_objective(policy, ref, batch, ObjectiveConfig(kind="grpo", group_size=2)).residuals == []
        assert len(evaluate_objective(policy, ref, batch, ObjectiveConfig(kind="tbrm")).residuals) == 4


def test_zero_reward_rule_keeps_reference_fixed(zero_reward_mdp):
    """Constant-zero tasks: the shaped loss has zero gradient at the reference"""
    assert isinstance(zero_reward_mdp.reward_rule, Constant)
    policy = TabularPolicy.for_mdp(zero_reward_mdp, scale=1.0, seed=0)
    batch = rollout_batch(zero_reward_mdp, policy, zero_reward_mdp.prompt_states * 3, spawn_seeds(0, 6))
    result = reval_loss(policy, ReferenceSnapshot.take(policy), batch, ObjectiveConfig())
    assert result.gradient.norm == 0.0
