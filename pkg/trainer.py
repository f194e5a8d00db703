"""
Trainer - replay-buffer training loop with periodic reference resets
Versie: 1.0

Every iteration samples prompts, rolls out N responses per prompt, pushes
them into the FIFO buffer and performs K parameter updates. Updates come from
the fresh batch or from uniform buffer samples depending on the update
pattern; GRPO always trains on the fresh batch. The reference policy is
re-snapshotted every `reset_period` iterations.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigurationError, NumericAbortError, StateSpaceLimitError
from objectives import ObjectiveConfig, ObjectiveResult, apply_reward_transform, evaluate_objective
from oracles import (
    DEFAULT_STATE_LIMIT,
    calibrate_reference,
    exact_kl,
    exact_success_rate,
    shaping_invariance_check,
    soft_value_iteration_oracle,
    tilted_reference,
)
from policy_engine import LogitPolicy, ReferenceSnapshot, TabularPolicy, kl_to_reference, save_policy
from replay import ReplayBuffer
from token_mdp import (
    ExactMatch,
    PromptSpec,
    TokenMdp,
    Trajectory,
    avg_at_n,
    rollout_batch,
    sample_prompts,
    spawn_seeds,
)

logger = logging.getLogger(__name__)

MetricsSink = Callable[["MetricsRecord"], None]


# ============================================
# CONFIGURATION
# ============================================


class OptimizerConfig(BaseModel):
    """torch.optim settings"""

    model_config = ConfigDict(extra="forbid")

    name: Literal["sgd", "adam"] = Field(default="adam", description="Optimizer family")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0, description="Adam first-moment decay")
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0, description="Adam second-moment decay")
    eps: float = Field(default=1e-8, gt=0.0, description="Adam denominator epsilon")


class BufferConfig(BaseModel):
    """Replay buffer capacity, update batch size and update pattern"""

    model_config = ConfigDict(extra="forbid")

    capacity: int = Field(default=40, ge=1, description="Buffer capacity M (trajectories)")
    batch_size: Optional[int] = Field(
        default=None, ge=1, description="Update batch size B; None uses the fresh batch size"
    )
    update_pattern: Literal["pure_buffer", "onpolicy_then_buffer"] = Field(
        default="onpolicy_then_buffer",
        description="pure_buffer samples every update; onpolicy_then_buffer trains on the fresh batch first",
    )
    sample_with_replacement: bool = Field(default=True, description="Uniform draws with replacement")


class EvalConfig(BaseModel):
    """avg@N evaluation on the training prompts"""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = Field(default=True, description="Evaluate during training")
    n: int = Field(default=64, ge=1, description="Samples per prompt for avg@N")
    period: int = Field(default=1, ge=1, description="Evaluate every `period` iterations")
    threshold: float = Field(default=0.95, gt=0.0, le=1.0, description="Success threshold")
    stop_at_threshold: bool = Field(default=False, description="End training once reached")
    exact: bool = Field(
        default=False, description="Use the enumerated success rate instead of sampling"
    )


class TrainerConfig(BaseModel):
    """All settings of one training run"""

    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(default=100, ge=1, description="Generation rounds T")
    prompts_per_iteration: int = Field(default=1, ge=1, description="Prompts sampled per round")
    rollouts_per_prompt: int = Field(default=8, ge=1, description="Responses per prompt N")
    updates_per_generation: int = Field(default=1, ge=1, description="Updates per round K (step=K)")
    learning_rate: float = Field(default=1e-2, gt=0.0, description="Optimizer learning rate")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    reset_period: int = Field(default=0, ge=0, description="Reference reset period P, 0 = never")
    residual_reset_threshold: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Experimental: reset when the mean |delta| of an update drops below this",
    )
    seed: int = Field(default=0, ge=0, description="Root seed of the run")
    temperature: float = Field(default=1.0, gt=0.0, description="Rollout temperature")
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    buffer: BufferConfig = Field(default_factory=BufferConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    checkpoint_every: int = Field(default=0, ge=0, description="Checkpoint period, 0 = off")
    exact_kl: bool = Field(default=False, description="Record the enumerated KL every update")
    rollout_workers: int = Field(default=1, ge=1, description="Threads for rollouts")

    @property
    def fresh_batch_size(self) -> int:
        return self.prompts_per_iteration * self.rollouts_per_prompt

    @property
    def update_batch_size(self) -> int:
        return self.buffer.batch_size or self.fresh_batch_size

    @model_validator(mode="after")
    def _consistent(self) -> "TrainerConfig":
        if self.buffer.capacity < self.update_batch_size:
            raise ValueError(
                f"buffer.capacity ({self.buffer.capacity}) must be at least the batch size B ({self.update_batch_size})"
            )
        if self.buffer.capacity < self.fresh_batch_size:
            raise ValueError(
                f"buffer.capacity ({self.buffer.capacity}) cannot hold one generation round ({self.fresh_batch_size})"
            )
        grouped = self.objective.kind == "grpo" or self.objective.reward_transform == "mean_normalized"
        if grouped and self.objective.group_size != self.rollouts_per_prompt:
            raise ValueError(
                f"objective.group_size ({self.objective.group_size}) must equal rollouts_per_prompt "
                f"({self.rollouts_per_prompt}) for grouped rewards"
            )
        if (
            grouped
            and self.objective.kind != "grpo"
            and self.update_batch_size % self.objective.group_size != 0
        ):
            raise ValueError("buffer.batch_size must be a multiple of objective.group_size")
        return self


# ============================================
# RECORDS AND STATE
# ============================================


class MetricsRecord(BaseModel):
    """One record per parameter update (plus a final record on abort)"""

    iteration: int = Field(description="Generation round, 1-based")
    update_index: int = Field(description="Update within the round, 0-based")
    generation_count: int = Field(description="Generation rounds so far")
    update_count: int = Field(description="Parameter updates so far")
    batch_source: Literal["fresh", "buffer", "none"] = Field(description="Where the batch came from")
    status: Literal["ok", "aborted"] = Field(default="ok")
    loss: Optional[float] = Field(default=None)
    grad_norm: Optional[float] = Field(default=None, description="Norm before clipping")
    grad_clipped: bool = Field(default=False)
    kl_to_ref: Optional[float] = Field(
        default=None, description="Sampled sequence KL on the round's fresh batch after the update"
    )
    kl_exact: Optional[float] = Field(default=None, description="Enumerated KL when enabled")
    fresh_reward_mean: Optional[float] = Field(default=None, description="Mean rule reward of the fresh batch")
    avg_at_n: Optional[float] = Field(default=None, description="Evaluation success rate")
    staleness_mean: Optional[float] = Field(default=None)
    staleness_max: Optional[int] = Field(default=None)
    buffer_size: Optional[int] = Field(default=None)
    buffer_mean_reuse: Optional[float] = Field(
        default=None, description="Mean uses of evicted trajectories so far"
    )
    residual_delta: Optional[float] = Field(default=None)
    residual_reward_term: Optional[float] = Field(default=None)
    residual_value_gap: Optional[float] = Field(default=None)
    residual_log_ratio: Optional[float] = Field(default=None)
    clipped_fraction: Optional[float] = Field(default=None)
    reference_iter: int = Field(default=0, description="Snapshot iteration of the reference")
    reference_reset: bool = Field(default=False, description="Reference was reset after this update")
    kl_before_reset: Optional[float] = Field(default=None)
    diagnostic: Optional[Dict] = Field(default=None, description="Filled on numeric abort")


class TrainerState(BaseModel):
    """Mutable loop state; the optimizer holds the moments"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    iteration: int = 0
    policy: LogitPolicy
    reference: ReferenceSnapshot
    buffer: ReplayBuffer
    optimizer: torch.optim.Optimizer
    metrics: List[MetricsRecord] = Field(default_factory=list)
    generation_count: int = 0
    update_count: int = 0
    next_traj_id: int = 0


class TrainResult(BaseModel):
    """Outcome of train()"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    policy: LogitPolicy
    reference: ReferenceSnapshot
    metrics: List[MetricsRecord]
    generation_count: int
    update_count: int
    initial_avg: Optional[float] = None
    eval_curve: List[Tuple[int, float]] = Field(default_factory=list)
    rounds_to_threshold: Optional[int] = None
    final_kl_exact: Optional[float] = None
    mean_reuse: Optional[float] = None
    buffer: Optional[ReplayBuffer] = None

    @property
    def final_kl_sampled(self) -> Optional[float]:
        values = [m.kl_to_ref for m in self.metrics if m.kl_to_ref is not None]
        return values[-1] if values else None


# ============================================
# HELPERS
# ============================================


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit seed for one (iteration, stream, ...) coordinate"""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint32)[0])


def make_optimizer(policy: LogitPolicy, cfg: TrainerConfig) -> torch.optim.Optimizer:
    if cfg.optimizer.name == "sgd":
        return torch.optim.SGD([policy.theta], lr=cfg.learning_rate)
    return torch.optim.Adam(
        [policy.theta],
        lr=cfg.learning_rate,
        betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
        eps=cfg.optimizer.eps,
    )


def reset_reference(state: TrainerState) -> TrainerState:
    """Reference <- deep copy of the current parameters"""
    state.reference = ReferenceSnapshot.take(state.policy, state.iteration)
    logger.info(f"reference reset at iteration {state.iteration}")
    return state


def _apply_update(
    state: TrainerState, result: ObjectiveResult, cfg: TrainerConfig
) -> Tuple[float, bool]:
    """Write the gradient into theta.grad, clip if configured and step.

    An all-zero gradient leaves the parameters and the optimizer moments untouched.
    """
    norm = result.grad_norm
    if not np.any(result.gradient.values):
        return norm, False
    state.optimizer.zero_grad()
    state.policy.theta.grad = torch.from_numpy(result.gradient.values.copy())
    clipped = False
    clip = cfg.objective.effective_grad_clip
    if clip is not None:
        torch.nn.utils.clip_grad_norm_([state.policy.theta], clip)
        clipped = norm > clip
    state.optimizer.step()
    if not bool(torch.isfinite(state.policy.theta).all()):
        raise NumericAbortError(
            "non-finite parameters after optimizer step",
            diagnostic={"grad_norm": norm, "iteration": state.iteration},
        )
    return norm, clipped


def _evaluate(
    mdp: TokenMdp, policy: LogitPolicy, cfg: TrainerConfig, iteration: int
) -> float:
    if cfg.eval.exact:
        return exact_success_rate(mdp, policy)
    rates = [
        avg_at_n(
            mdp,
            policy,
            prompt,
            cfg.eval.n,
            derive_seed(cfg.seed, iteration, 3, i),
            temperature=cfg.temperature,
        )
        for i, prompt in enumerate(mdp.prompt_states)
    ]
    return float(np.mean(rates))


def _exact_kl_or_none(mdp: TokenMdp, state: TrainerState) -> Optional[float]:
    try:
        return exact_kl(mdp, state.policy, state.reference, state_limit=DEFAULT_STATE_LIMIT)
    except StateSpaceLimitError:
        logger.warning(f"exact KL skipped: '{mdp.name}' exceeds {DEFAULT_STATE_LIMIT} states")
        return None


def _collect(
    mdp: TokenMdp, state: TrainerState, cfg: TrainerConfig
) -> List[Trajectory]:
    """Sample prompts, N rollouts each (prompt-major order), transformed rewards"""
    rng = np.random.default_rng(derive_seed(cfg.seed, state.iteration, 1))
    prompts = sample_prompts(mdp, cfg.prompts_per_iteration, rng)
    expanded = [p for p in prompts for _ in range(cfg.rollouts_per_prompt)]
    seeds = spawn_seeds(derive_seed(cfg.seed, state.iteration, 0), len(expanded))
    batch = rollout_batch(
        mdp,
        state.policy,
        expanded,
        seeds,
        temperature=cfg.temperature,
        collected_at_iter=state.iteration,
        first_id=state.next_traj_id,
        workers=cfg.rollout_workers,
    )
    state.next_traj_id += len(batch)
    state.generation_count += 1
    return apply_reward_transform(batch, cfg.objective)


def _update_batches(
    state: TrainerState, fresh: List[Trajectory], cfg: TrainerConfig
) -> List[Tuple[str, Optional[List[Trajectory]]]]:
    """The K (source, batch) pairs of one round; buffer batches are drawn lazily"""
    k = cfg.updates_per_generation
    if cfg.objective.kind == "grpo":
        return [("fresh", fresh)] * k
    if cfg.buffer.update_pattern == "onpolicy_then_buffer":
        return [("fresh", fresh)] + [("buffer", None)] * (k - 1)
    return [("buffer", None)] * k


# ============================================
# TRAINING LOOP
# ============================================


def train(
    cfg: TrainerConfig,
    mdp: TokenMdp,
    init_policy: LogitPolicy,
    reference: Optional[LogitPolicy] = None,
    sink: Optional[MetricsSink] = None,
    checkpoint_dir: Optional[Path] = None,
) -> TrainResult:
    """Run T generation rounds; deterministic given cfg.seed.

    The reference defaults to a snapshot of init_policy. Every update emits a
    MetricsRecord to `sink`; on a non-finite loss an aborted record with the
    diagnostic is emitted before NumericAbortError propagates.
    """
    policy = init_policy.clone()
    ref = ReferenceSnapshot.take(reference if reference is not None else init_policy, 0)
    state = TrainerState(
        policy=policy,
        reference=ref,
        buffer=ReplayBuffer(
            cfg.buffer.capacity,
            seed=derive_seed(cfg.seed, 0, 2),
            sample_with_replacement=cfg.buffer.sample_with_replacement,
        ),
        optimizer=make_optimizer(policy, cfg),
    )

    def emit(record: MetricsRecord) -> None:
        state.metrics.append(record)
        if sink is not None:
            sink(record)

    initial_avg = _evaluate(mdp, policy, cfg, 0) if cfg.eval.enabled else None
    eval_curve: List[Tuple[int, float]] = []
    rounds_to_threshold: Optional[int] = None
    if initial_avg is not None:
        eval_curve.append((0, initial_avg))
        if initial_avg >= cfg.eval.threshold:
            rounds_to_threshold = 0

    logger.info(
        f"training '{mdp.name}': objective={cfg.objective.kind} beta={cfg.objective.beta} "
        f"T={cfg.iterations} N={cfg.rollouts_per_prompt} K={cfg.updates_per_generation}"
    )

    for iteration in range(1, cfg.iterations + 1):
        state.iteration = iteration
        fresh = _collect(mdp, state, cfg)
        if cfg.objective.kind != "grpo":
            state.buffer.push_batch(fresh)
        fresh_reward = float(np.mean([t.rule_reward for t in fresh]))

        plan = _update_batches(state, fresh, cfg)
        for k, (source, batch) in enumerate(plan):
            if batch is None:
                batch = state.buffer.sample_uniform(
                    cfg.update_batch_size, rng_seed=derive_seed(cfg.seed, iteration, 2, k)
                )
            elif cfg.objective.kind != "grpo":
                state.buffer.record_use(t.traj_id for t in batch)

            try:
                result = evaluate_objective(state.policy, state.reference, batch, cfg.objective)
                norm, clipped = _apply_update(state, result, cfg)
            except NumericAbortError as error:
                diagnostic = {**error.diagnostic, "message": str(error), "traj_id": error.traj_id}
                emit(
                    MetricsRecord(
                        iteration=iteration,
                        update_index=k,
                        generation_count=state.generation_count,
                        update_count=state.update_count,
                        batch_source=source,
                        status="aborted",
                        reference_iter=state.reference.snapshot_iter,
                        diagnostic=diagnostic,
                    )
                )
                logger.error(f"numeric abort at iteration {iteration}, update {k}: {error}")
                raise
            state.update_count += 1

            record = MetricsRecord(
                iteration=iteration,
                update_index=k,
                generation_count=state.generation_count,
                update_count=state.update_count,
                batch_source=source,
                loss=result.loss,
                grad_norm=norm,
                grad_clipped=clipped,
                kl_to_ref=kl_to_reference(state.policy, state.reference, fresh),
                fresh_reward_mean=fresh_reward,
                clipped_fraction=result.clipped_fraction,
                reference_iter=state.reference.snapshot_iter,
            )
            means = result.residual_means()
            if means:
                record.residual_delta = means["delta"]
                record.residual_reward_term = means["reward_term"]
                record.residual_value_gap = means["value_gap"]
                record.residual_log_ratio = means["log_ratio"]
            if len(state.buffer):
                stale = state.buffer.staleness_stats(iteration)
                record.staleness_mean = stale.mean_age
                record.staleness_max = stale.max_age
                record.buffer_size = stale.size
                record.buffer_mean_reuse = state.buffer.reuse_summary().get("retired_mean_uses")
            if cfg.exact_kl:
                record.kl_exact = _exact_kl_or_none(mdp, state)

            last = k == len(plan) - 1
            residual_trigger = (
                cfg.residual_reset_threshold is not None
                and result.residuals
                and float(np.mean([abs(r.delta) for r in result.residuals])) < cfg.residual_reset_threshold
            )
            periodic_trigger = last and cfg.reset_period > 0 and iteration % cfg.reset_period == 0
            if periodic_trigger or residual_trigger:
                record.kl_before_reset = record.kl_to_ref
                reset_reference(state)
                record.reference_reset = True
                record.reference_iter = state.reference.snapshot_iter
                record.kl_to_ref = kl_to_reference(state.policy, state.reference, fresh)
                if cfg.exact_kl:
                    record.kl_exact = _exact_kl_or_none(mdp, state)

            if last and cfg.eval.enabled and iteration % cfg.eval.period == 0:
                record.avg_at_n = _evaluate(mdp, state.policy, cfg, iteration)
                eval_curve.append((state.generation_count, record.avg_at_n))
                if rounds_to_threshold is None and record.avg_at_n >= cfg.eval.threshold:
                    rounds_to_threshold = state.generation_count
            emit(record)

        if checkpoint_dir is not None and cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
            save_policy(state.policy, Path(checkpoint_dir) / f"policy_iter{iteration:05d}.txt")
            save_policy(
                state.reference.policy,
                Path(checkpoint_dir) / f"reference_iter{iteration:05d}.txt",
                snapshot_iter=state.reference.snapshot_iter,
            )

        last_record = state.metrics[-1]
        logger.debug(
            f"iter {iteration}/{cfg.iterations} loss={last_record.loss:.6g} "
            f"kl={last_record.kl_to_ref:.3g} reward={fresh_reward:.3f}"
        )
        if rounds_to_threshold is not None and cfg.eval.stop_at_threshold:
            logger.info(f"threshold {cfg.eval.threshold} reached after {rounds_to_threshold} rounds")
            break

    mean_reuse = None
    if state.buffer.retired_uses:
        mean_reuse = state.buffer.mean_reuse()
    return TrainResult(
        policy=state.policy,
        reference=state.reference,
        metrics=state.metrics,
        generation_count=state.generation_count,
        update_count=state.update_count,
        initial_avg=initial_avg,
        eval_curve=eval_curve,
        rounds_to_threshold=rounds_to_threshold,
        final_kl_exact=_exact_kl_or_none(mdp, state) if cfg.exact_kl else None,
        mean_reuse=mean_reuse,
        buffer=state.buffer,
    )


# ============================================
# ONE-SHOT DIFFICULTY EXPERIMENT
# ============================================

DIFFICULTY_ANCHORS: Dict[str, float] = {"hard": 0.10, "medium": 0.40, "easy": 0.68}


def difficulty_mdp(level: str) -> TokenMdp:
    """Single prompt, vocab 4 with EOS = 3, target response [1, 2, EOS]"""
    if level not in DIFFICULTY_ANCHORS:
        raise ConfigurationError(f"unknown difficulty '{level}', choose from {sorted(DIFFICULTY_ANCHORS)}")
    return TokenMdp(
        name=f"one_shot_{level}",
        vocab_size=4,
        horizon=3,
        prompts=[PromptSpec(tokens=(0,))],
        reward_rule=ExactMatch(target=(1, 2, 3)),
        eos_token=3,
    )


@lru_cache(maxsize=None)
def difficulty_bias(level: str) -> float:
    _, bias = calibrate_reference(difficulty_mdp(level), DIFFICULTY_ANCHORS[level])
    return bias


def difficulty_task(level: str) -> Tuple[TokenMdp, TabularPolicy]:
    """Task plus the tilted reference whose exact success rate hits the anchor"""
    mdp = difficulty_mdp(level)
    return mdp, tilted_reference(mdp, difficulty_bias(level))


def one_shot_config(method: str, step: int, seed: int, budget: int = 200) -> TrainerConfig:
    """Desk-scale defaults for the one-shot comparison"""
    if method == "grpo":
        objective = ObjectiveConfig(kind="grpo", group_size=8)
        buffer = BufferConfig(capacity=8)
    else:
        objective = ObjectiveConfig(kind="reval", beta=0.1)
        buffer = BufferConfig(capacity=8 * max(step, 1), update_pattern="onpolicy_then_buffer")
    return TrainerConfig(
        iterations=budget,
        prompts_per_iteration=1,
        rollouts_per_prompt=8,
        updates_per_generation=step,
        learning_rate=0.1,
        seed=seed,
        objective=objective,
        buffer=buffer,
        eval=EvalConfig(n=64, threshold=0.95, stop_at_threshold=True),
    )


class OneShotResult(BaseModel):
    """Per-seed learning curves and rounds-to-threshold for one method"""

    level: str
    method: str
    step: int
    curves: Dict[int, List[Tuple[int, float]]] = Field(default_factory=dict)
    rounds: Dict[int, Optional[int]] = Field(default_factory=dict)

    @property
    def median_rounds(self) -> Optional[float]:
        """Seed median; runs that never reached the threshold count as infinite"""
        values = [np.inf if r is None else r for r in self.rounds.values()]
        if not values:
            return None
        median = float(np.median(values))
        return None if np.isinf(median) else median


def one_shot_experiment(
    level: str,
    method: str,
    seeds: Sequence[int],
    step: int = 1,
    budget: int = 200,
    config: Optional[TrainerConfig] = None,
) -> OneShotResult:
    """Train from the calibrated reference on a single prompt until avg@64 >= 0.95"""
    mdp, reference = difficulty_task(level)
    result = OneShotResult(level=level, method=method, step=step)
    for seed in seeds:
        cfg = (
            config.model_copy(update={"seed": seed})
            if config is not None
            else one_shot_config(method, step, seed, budget)
        )
        run = train(cfg, mdp, reference)
        result.curves[seed] = run.eval_curve
        result.rounds[seed] = run.rounds_to_threshold
        logger.info(f"one-shot {level} {method} step={step} seed={seed}: rounds={run.rounds_to_threshold}")
    return result


__all__ = [
    "BufferConfig",
    "DIFFICULTY_ANCHORS",
    "EvalConfig",
    "MetricsRecord",
    "OneShotResult",
    "OptimizerConfig",
    "TrainResult",
    "TrainerConfig",
    "TrainerState",
    "derive_seed",
    "difficulty_bias",
    "difficulty_mdp",
    "difficulty_task",
    "make_optimizer",
    "one_shot_config",
    "one_shot_experiment",
    "reset_reference",
    "shaping_invariance_check",
    "soft_value_iteration_oracle",
    "train",
]
