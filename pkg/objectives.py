"""
Objectives - trajectory Bellman losses, GRPO surrogate and reward transforms
Versie: 1.0

The value-based losses share one Bellman error per trajectory

    e(tau) = value_gap + log pi_theta(tau) - log pi_ref(tau) - r(tau) / beta

with value_gap = V_theta(s1) - V_ref(s1) for ReVal, V_theta(s1) for TBRM and 0
for the regression variant. The loss is the batch mean of e^2. The residual
reported for diagnostics is delta = -e, so that a positive delta pushes the
log-likelihood of the trajectory up.
"""

import logging
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ContractViolationError, NumericAbortError
from policy_engine import (
    DTYPE,
    GradVector,
    LogitPolicy,
    ReferenceSnapshot,
    TabularPolicy,
    batch_trajectory_terms,
)
from token_mdp import Trajectory

logger = logging.getLogger(__name__)

ObjectiveKind = Literal["reval", "tbrm", "regression", "grpo"]
RewardTransform = Literal["zero_one", "mean_normalized", "plus_minus_one"]

STD_FLOOR = 1e-6
REGRESSION_GRAD_CLIP = 10.0


# ============================================
# CONFIG AND RESULT MODELS
# ============================================


class ObjectiveConfig(BaseModel):
    """Loss selection and its hyper-parameters"""

    model_config = ConfigDict(extra="forbid")

    kind: ObjectiveKind = Field(default="reval", description="Which loss to optimize")
    beta: float = Field(default=0.1, gt=0.0, description="KL regularization strength")
    reward_transform: RewardTransform = Field(
        default="zero_one", description="Mapping from rule reward to training reward"
    )
    clip_low: float = Field(default=0.2, ge=0.0, lt=1.0, description="GRPO lower clip epsilon")
    clip_high: float = Field(default=0.28, ge=0.0, description="GRPO upper clip epsilon")
    group_size: int = Field(default=8, ge=1, description="Rollouts per prompt group G")
    normalize_by_std: bool = Field(
        default=True, description="Divide GRPO advantages by the group standard deviation"
    )
    grad_clip_norm: Optional[float] = Field(
        default=None,
        ge=0.0,
        description="Gradient-norm clip; None picks 10 for regression and off otherwise, 0 disables",
    )

    @model_validator(mode="after")
    def _clip_order(self) -> "ObjectiveConfig":
        if not self.clip_low < self.clip_high:
            raise ValueError(f"clip_low ({self.clip_low}) must be below clip_high ({self.clip_high})")
        return self

    @property
    def effective_grad_clip(self) -> Optional[float]:
        if self.grad_clip_norm is None:
            return REGRESSION_GRAD_CLIP if self.kind == "regression" else None
        return self.grad_clip_norm or None


class Residual(BaseModel):
    """Per-trajectory residual and its additive components"""

    traj_id: int = Field(description="Trajectory the residual belongs to")
    delta: float = Field(description="reward_term - value_gap - log_ratio")
    reward_term: float = Field(description="r / beta")
    value_gap: float = Field(description="V_theta(s1) - V_ref(s1) (ReVal), V_theta(s1) (TBRM), 0 (regression)")
    log_ratio: float = Field(description="log pi_theta(tau) - log pi_ref(tau)")

    @property
    def bellman_error(self) -> float:
        """The term inside the square"""
        return -self.delta


class ObjectiveResult(BaseModel):
    """Loss value, gradient and diagnostics of one objective evaluation"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    loss: float = Field(description="Batch loss")
    gradient: GradVector = Field(description="d loss / d theta, unclipped")
    residuals: List[Residual] = Field(default_factory=list, description="Empty for GRPO")
    clipped_fraction: Optional[float] = Field(
        default=None, description="GRPO: share of tokens where the clipped branch was active"
    )

    @property
    def grad_norm(self) -> float:
        return self.gradient.norm

    def residual_means(self) -> dict:
        if not self.residuals:
            return {}
        return {
            "delta": float(np.mean([r.delta for r in self.residuals])),
            "reward_term": float(np.mean([r.reward_term for r in self.residuals])),
            "value_gap": float(np.mean([r.value_gap for r in self.residuals])),
            "log_ratio": float(np.mean([r.log_ratio for r in self.residuals])),
        }


# ============================================
# REWARD TRANSFORMS
# ============================================


def transform_rewards(raw: Sequence[float], cfg: ObjectiveConfig) -> np.ndarray:
    """ZeroOne keeps r, MeanNormalized subtracts the group mean, PlusMinusOne maps to 2r - 1.

    Groups are consecutive chunks of cfg.group_size rewards.
    """
    rewards = np.asarray(raw, dtype=np.float64)
    if cfg.reward_transform == "zero_one":
        return rewards.copy()
    if cfg.reward_transform == "plus_minus_one":
        return 2.0 * rewards - 1.0
    if rewards.size % cfg.group_size != 0:
        raise ContractViolationError(
            f"{rewards.size} rewards cannot be split into groups of {cfg.group_size}"
        )
    groups = rewards.reshape(-1, cfg.group_size)
    return (groups - groups.mean(axis=1, keepdims=True)).ravel()


def apply_reward_transform(batch: Sequence[Trajectory], cfg: ObjectiveConfig) -> List[Trajectory]:
    """Copies of the trajectories with training_reward set from rule_reward"""
    transformed = transform_rewards([t.rule_reward for t in batch], cfg)
    return [
        t.model_copy(update={"training_reward": float(r)}) for t, r in zip(batch, transformed)
    ]


def group_advantages(
    rewards: Sequence[float], group_size: int, normalize_by_std: bool = True
) -> np.ndarray:
    """(r - group mean) / max(group std, 1e-6); degenerate groups get 0"""
    r = torch.as_tensor(np.asarray(rewards, dtype=np.float64))
    if r.numel() % group_size != 0:
        raise ContractViolationError(f"group_size {group_size} does not divide {r.numel()} rewards")
    groups = r.reshape(-1, group_size)
    centered = groups - groups.mean(dim=-1, keepdim=True)
    degenerate = (groups == groups[:, :1]).all(dim=-1, keepdim=True)
    if normalize_by_std and group_size > 1:
        std = torch.std(groups, dim=-1, keepdim=True)
        centered = centered / torch.clamp(std, min=STD_FLOOR)
    advantages = torch.where(degenerate, torch.zeros_like(centered), centered)
    return advantages.flatten().numpy()


def clipped_surrogate(
    ratio: torch.Tensor, advantage: torch.Tensor, cfg: ObjectiveConfig
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-token min(ratio * A, clip(ratio, 1 - low, 1 + high) * A) and the clip mask"""
    unclipped = ratio * advantage
    clipped = torch.clamp(ratio, min=1.0 - cfg.clip_low, max=1.0 + cfg.clip_high) * advantage
    return torch.min(unclipped, clipped), clipped < unclipped


# ============================================
# BELLMAN LOSSES
# ============================================


def _require_batch(batch: Sequence[Trajectory]) -> None:
    if not batch:
        raise ContractViolationError("objective evaluated on an empty batch")


def _bellman_components(
    policy: LogitPolicy,
    ref: ReferenceSnapshot,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
    kind: ObjectiveKind,
    theta: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(reward_term, value_gap, log_ratio) per trajectory"""
    logp, value = batch_trajectory_terms(policy, batch, theta)
    with torch.no_grad():
        logp_ref, value_ref = batch_trajectory_terms(ref.policy, batch)
    reward_term = torch.tensor([t.training_reward for t in batch], dtype=DTYPE) / cfg.beta

    if kind == "reval":
        value_gap = value - value_ref
    elif kind == "tbrm":
        value_gap = value
    elif kind == "regression":
        value_gap = torch.zeros_like(value)
    else:
        raise ContractViolationError(f"'{kind}' has no Bellman residual")
    return reward_term, value_gap, logp - logp_ref


def bellman_errors(
    policy: LogitPolicy,
    ref: ReferenceSnapshot,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
    kind: Optional[ObjectiveKind] = None,
    theta: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    reward_term, value_gap, log_ratio = _bellman_components(
        policy, ref, batch, cfg, kind or cfg.kind, theta
    )
    return value_gap + log_ratio - reward_term


def objective_fn(
    policy: LogitPolicy,
    ref: ReferenceSnapshot,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
) -> Callable[[torch.Tensor], torch.Tensor]:
    """theta -> loss, for gradient checks against the same objective"""
    _require_batch(batch)
    if cfg.kind == "grpo":
        return lambda theta: _grpo_terms(policy, batch, cfg, theta)[0]
    return lambda theta: torch.mean(bellman_errors(policy, ref, batch, cfg, theta=theta) ** 2)


def _squared_residual_loss(
    policy: LogitPolicy,
    ref: ReferenceSnapshot,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
    kind: ObjectiveKind,
) -> ObjectiveResult:
    _require_batch(batch)
    theta = policy.theta.detach().clone().requires_grad_(True)
    reward_term, value_gap, log_ratio = _bellman_components(policy, ref, batch, cfg, kind, theta)
    error = value_gap + log_ratio - reward_term

    finite = torch.isfinite(error)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite)[0, 0])
        traj = batch[bad]
        raise NumericAbortError(
            f"non-finite {kind} residual for trajectory {traj.traj_id}",
            traj_id=traj.traj_id,
            diagnostic={
                "kind": kind,
                "traj_id": traj.traj_id,
                "reward_term": float(reward_term[bad]),
                "value_gap": float(value_gap[bad].detach()),
                "log_ratio": float(log_ratio[bad].detach()),
            },
        )

    loss = torch.mean(error**2)
    if error.requires_grad:
        (g,) = torch.autograd.grad(loss, theta, allow_unused=True)
        values = np.zeros(policy.num_params) if g is None else g.detach().numpy().copy()
    else:
        values = np.zeros(policy.num_params)

    residuals = [
        Residual(
            traj_id=t.traj_id,
            delta=float(-error[i].detach()),
            reward_term=float(reward_term[i]),
            value_gap=float(value_gap[i].detach()),
            log_ratio=float(log_ratio[i].detach()),
        )
        for i, t in enumerate(batch)
    ]
    return ObjectiveResult(
        loss=float(loss.detach()),
        gradient=GradVector(values=values, loss=float(loss.detach())),
        residuals=residuals,
    )


def reval_loss(
    policy: LogitPolicy, ref: ReferenceSnapshot, batch: Sequence[Trajectory], cfg: ObjectiveConfig
) -> ObjectiveResult:
    """Shaped trajectory Bellman residual; zero at theta = ref when r = 0"""
    return _squared_residual_loss(policy, ref, batch, cfg, "reval")


def tbrm_loss(
    policy: LogitPolicy, ref: ReferenceSnapshot, batch: Sequence[Trajectory], cfg: ObjectiveConfig
) -> ObjectiveResult:
    """Unshaped trajectory Bellman residual (V_theta(s1) without the V_ref offset)"""
    return _squared_residual_loss(policy, ref, batch, cfg, "tbrm")


def regression_loss(
    policy: LogitPolicy, ref: ReferenceSnapshot, batch: Sequence[Trajectory], cfg: ObjectiveConfig
) -> ObjectiveResult:
    """Log-ratio regression onto r / beta, meant for mean-normalized rewards"""
    return _squared_residual_loss(policy, ref, batch, cfg, "regression")


def residual_decompose(
    policy: LogitPolicy, ref: ReferenceSnapshot, traj: Trajectory, cfg: ObjectiveConfig
) -> Residual:
    kind = cfg.kind if cfg.kind != "grpo" else "reval"
    with torch.no_grad():
        reward_term, value_gap, log_ratio = _bellman_components(policy, ref, [traj], cfg, kind)
    return Residual(
        traj_id=traj.traj_id,
        delta=float(reward_term[0] - value_gap[0] - log_ratio[0]),
        reward_term=float(reward_term[0]),
        value_gap=float(value_gap[0]),
        log_ratio=float(log_ratio[0]),
    )


def analytic_gradient(
    policy: LogitPolicy,
    ref: ReferenceSnapshot,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
    include_value_term: bool = True,
) -> np.ndarray:
    """-2 mean[delta * grad(V_theta(s1) + log pi_theta(tau))].

    Tabular policies use the closed forms (softmax, one-hot minus softmax);
    other parameterizations differentiate the surrogate sum(delta * (V + log pi))
    with delta held fixed. With include_value_term=False the V_theta(s1) part
    is dropped, which is the simplified diagnostic form of the gradient.
    """
    _require_batch(batch)
    kind = cfg.kind
    with torch.no_grad():
        delta = -bellman_errors(policy, ref, batch, cfg, kind=kind).numpy()
    use_value = include_value_term and kind in ("reval", "tbrm")

    if isinstance(policy, TabularPolicy):
        total = np.zeros(policy.num_params)
        for d, traj in zip(delta, batch):
            direction = np.zeros(policy.num_params)
            for state, action in traj.steps():
                direction += policy.analytic_grad_logprob(state, action)
            if use_value:
                direction += policy.analytic_grad_soft_value(traj.initial_state)
            total += d * direction
        return -2.0 * total / len(batch)

    theta = policy.theta.detach().clone().requires_grad_(True)
    logp, value = batch_trajectory_terms(policy, batch, theta)
    surrogate = logp + value if use_value else logp
    weighted = torch.sum(torch.as_tensor(delta) * surrogate)
    (g,) = torch.autograd.grad(weighted, theta, allow_unused=True)
    values = np.zeros(policy.num_params) if g is None else g.detach().numpy()
    return -2.0 * values / len(batch)


# ============================================
# GRPO
# ============================================


def _grpo_terms(
    policy: LogitPolicy,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
    theta: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    advantages = group_advantages([t.rule_reward for t in batch], cfg.group_size, cfg.normalize_by_std)

    states, actions, behavior, owners = [], [], [], []
    for i, traj in enumerate(batch):
        for h, (state, action) in enumerate(traj.steps()):
            states.append(state)
            actions.append(action)
            behavior.append(traj.behavior_logprobs[h])
            owners.append(i)

    z = policy.batch_logits(states, theta)
    log_pi = z - torch.logsumexp(z, dim=-1, keepdim=True)
    picked = log_pi.gather(1, torch.tensor(actions, dtype=torch.long).unsqueeze(1)).squeeze(1)
    ratio = torch.exp(picked - torch.tensor(behavior, dtype=DTYPE))
    token_adv = torch.as_tensor(advantages)[torch.tensor(owners, dtype=torch.long)]
    surrogate, clipped = clipped_surrogate(ratio, token_adv, cfg)
    return -torch.mean(surrogate), clipped


def grpo_loss(
    policy: LogitPolicy, batch: Sequence[Trajectory], cfg: ObjectiveConfig
) -> ObjectiveResult:
    """Token-mean clipped surrogate with group-standardized advantages (negated)"""
    _require_batch(batch)
    if len(batch) % cfg.group_size != 0:
        raise ContractViolationError(
            f"GRPO batch of {len(batch)} is not a multiple of group_size {cfg.group_size}"
        )
    theta = policy.theta.detach().clone().requires_grad_(True)
    loss, clipped = _grpo_terms(policy, batch, cfg, theta)
    if not bool(torch.isfinite(loss)):
        raise NumericAbortError("non-finite GRPO surrogate", diagnostic={"kind": "grpo"})
    (g,) = torch.autograd.grad(loss, theta, allow_unused=True)
    values = np.zeros(policy.num_params) if g is None else g.detach().numpy().copy()
    return ObjectiveResult(
        loss=float(loss.detach()),
        gradient=GradVector(values=values, loss=float(loss.detach())),
        clipped_fraction=float(clipped.double().mean()),
    )


def evaluate_objective(
    policy: LogitPolicy,
    ref: ReferenceSnapshot,
    batch: Sequence[Trajectory],
    cfg: ObjectiveConfig,
) -> ObjectiveResult:
    """Dispatch on cfg.kind"""
    if cfg.kind == "reval":
        return reval_loss(policy, ref, batch, cfg)
    if cfg.kind == "tbrm":
        return tbrm_loss(policy, ref, batch, cfg)
    if cfg.kind == "regression":
        return regression_loss(policy, ref, batch, cfg)
    return grpo_loss(policy, batch, cfg)
