"""
Token MDP - verifiable-reward tasks and trajectory rollout
Versie: 1.0

Autoregressive generation as a deterministic tree MDP: a state is the prompt
followed by the generated tokens, an action is one vocabulary token, and the
transition is plain concatenation. Responses always have exactly `horizon`
actions; after EOS the environment forces the pad token with probability 1.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import (
    TYPE_CHECKING,
    Annotated,
    List,
    Literal,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigurationError, ContractViolationError, StateSpaceLimitError

if TYPE_CHECKING:
    from policy_engine import LogitPolicy

logger = logging.getLogger(__name__)

Tokens = Tuple[int, ...]


# ============================================
# STATES
# ============================================


class State(NamedTuple):
    """Prompt plus the actions generated so far"""

    prompt: Tokens
    actions: Tokens = ()

    @property
    def tokens(self) -> Tokens:
        return self.prompt + self.actions

    @property
    def step(self) -> int:
        """Number of generated tokens (0 at the initial state)"""
        return len(self.actions)

    def __repr__(self) -> str:
        return f"State(prompt={list(self.prompt)}, actions={list(self.actions)})"


# ============================================
# REWARD RULES
# ============================================


class ExactMatch(BaseModel):
    """1 when the full action sequence equals the target"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["exact_match"] = "exact_match"
    target: Tokens = Field(description="Expected actions, pad-completed to the horizon")


class ChecksumModK(BaseModel):
    """1 when the sum of the response tokens (before EOS) hits the residue"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["checksum_mod_k"] = "checksum_mod_k"
    modulus: int = Field(gt=0, description="Modulus m")
    residue: int = Field(ge=0, description="Target residue, 0 <= residue < m")
    include_prompt: bool = Field(
        default=False, description="Add the prompt tokens to the checksum"
    )

    @model_validator(mode="after")
    def _residue_in_range(self) -> "ChecksumModK":
        if self.residue >= self.modulus:
            raise ValueError(f"residue {self.residue} must be below modulus {self.modulus}")
        return self


class PrefixCount(BaseModel):
    """1 when the response starts with at least `threshold` copies of a token"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["prefix_count"] = "prefix_count"
    target_token: int = Field(ge=0, description="Token that must lead the response")
    threshold: int = Field(ge=1, description="Minimum length of the leading run")


class Constant(BaseModel):
    """Fixed reward, used for zero-reward calibration runs"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["constant"] = "constant"
    value: float = Field(default=0.0, ge=0.0, le=1.0, description="Reward for every response")


RewardRule = Annotated[
    Union[ExactMatch, ChecksumModK, PrefixCount, Constant], Field(discriminator="kind")
]


# ============================================
# TASK DEFINITION
# ============================================


class PromptSpec(BaseModel):
    """Initial state with its sampling weight under rho"""

    model_config = ConfigDict(frozen=True)

    tokens: Tokens = Field(description="Prompt token ids")
    weight: float = Field(default=1.0, gt=0.0, description="Relative sampling weight")


class TokenMdp(BaseModel):
    """Token-level MDP with a deterministic verifier"""

    model_config = ConfigDict(frozen=True)

    name: str = Field(default="task", description="Human readable task name")
    vocab_size: int = Field(ge=2, description="Number of sampleable tokens |V|")
    horizon: int = Field(ge=1, description="Response length H")
    prompts: List[PromptSpec] = Field(min_length=1, description="Prompt set rho")
    reward_rule: RewardRule = Field(description="Deterministic verifier")
    eos_token: Optional[int] = Field(
        default=None, description="End-of-sequence id in [0, vocab_size); None for pad-free tasks"
    )
    pad_token: int = Field(
        description="Reserved pad id outside the sampleable range (default vocab_size)"
    )

    @model_validator(mode="before")
    @classmethod
    def _default_pad(cls, data):
        if isinstance(data, dict) and data.get("pad_token") is None and "vocab_size" in data:
            data = {**data, "pad_token": data["vocab_size"]}
        return data

    @field_validator("prompts", mode="before")
    @classmethod
    def _coerce_prompts(cls, value):
        # accept bare token lists next to {tokens, weight} tables
        if isinstance(value, (list, tuple)):
            return [
                {"tokens": item} if isinstance(item, (list, tuple)) else item
                for item in value
            ]
        return value

    @model_validator(mode="after")
    def _check_tokens(self) -> "TokenMdp":
        if self.eos_token is not None and not 0 <= self.eos_token < self.vocab_size:
            raise ValueError(f"eos_token {self.eos_token} outside [0, {self.vocab_size})")
        if 0 <= self.pad_token < self.vocab_size:
            raise ValueError(
                f"pad_token {self.pad_token} collides with the sampleable range [0, {self.vocab_size})"
            )
        if self.pad_token == self.eos_token:
            raise ValueError("pad_token and eos_token must differ")
        for prompt in self.prompts:
            if any(not 0 <= t < self.vocab_size for t in prompt.tokens):
                raise ValueError(f"prompt {list(prompt.tokens)} uses ids outside the vocabulary")
        rule = self.reward_rule
        if isinstance(rule, ExactMatch):
            if len(rule.target) != self.horizon:
                raise ValueError(
                    f"exact_match target has length {len(rule.target)}, horizon is {self.horizon}"
                )
            allowed = set(range(self.vocab_size)) | {self.pad_token}
            if any(t not in allowed for t in rule.target):
                raise ValueError("exact_match target uses ids outside the vocabulary and pad")
        if isinstance(rule, PrefixCount) and rule.target_token >= self.vocab_size:
            raise ValueError("prefix_count target_token outside the vocabulary")
        return self

    @property
    def prompt_states(self) -> List[State]:
        return [State(p.tokens) for p in self.prompts]

    @property
    def prompt_weights(self) -> np.ndarray:
        weights = np.array([p.weight for p in self.prompts], dtype=np.float64)
        return weights / weights.sum()


# ============================================
# TRAJECTORIES
# ============================================


class Trajectory(BaseModel):
    """One complete response with its behaviour log-probs and verified reward"""

    model_config = ConfigDict(frozen=True)

    traj_id: int = Field(default=0, description="Unique id assigned by the collector")
    prompt: Tokens = Field(description="Initial state tokens")
    actions: Tokens = Field(description="Exactly H actions, pad after EOS")
    behavior_logprobs: Tuple[float, ...] = Field(description="log pi_behavior(a_h|s_h) per step")
    num_sampled: int = Field(description="Steps before the pad suffix (through EOS)")
    rule_reward: float = Field(ge=0.0, le=1.0, description="Verifier output")
    training_reward: float = Field(default=None, description="Reward after the configured transform")
    collected_at_iter: int = Field(default=0, description="Iteration that produced the rollout")

    @model_validator(mode="before")
    @classmethod
    def _default_training_reward(cls, data):
        if isinstance(data, dict) and data.get("training_reward") is None:
            data = {**data, "training_reward": data.get("rule_reward")}
        return data

    @model_validator(mode="after")
    def _check_pad_suffix(self) -> "Trajectory":
        if len(self.behavior_logprobs) != len(self.actions):
            raise ValueError("behavior_logprobs must align with actions")
        if not 0 <= self.num_sampled <= len(self.actions):
            raise ValueError("num_sampled outside the action range")
        if any(lp != 0.0 for lp in self.behavior_logprobs[self.num_sampled:]):
            raise ValueError("pad steps must carry log-prob 0")
        return self

    @property
    def initial_state(self) -> State:
        return State(self.prompt)

    def steps(self) -> List[Tuple[State, int]]:
        """(state, action) pairs of the sampled prefix; pad steps are skipped"""
        pairs = []
        for h in range(self.num_sampled):
            pairs.append((State(self.prompt, self.actions[:h]), self.actions[h]))
        return pairs

    @property
    def behavior_logprob(self) -> float:
        return float(np.sum(self.behavior_logprobs))


# ============================================
# OPERATIONS
# ============================================


def is_terminal(mdp: TokenMdp, state: State) -> bool:
    """A state is terminal after H actions or right after EOS"""
    if state.step >= mdp.horizon:
        return True
    return mdp.eos_token is not None and state.step > 0 and state.actions[-1] == mdp.eos_token


def step(mdp: TokenMdp, state: State, action: int) -> State:
    """s_{h+1} = s_h + a_h"""
    if state.step >= mdp.horizon:
        raise ContractViolationError(
            f"horizon {mdp.horizon} exceeded: state already holds {state.step} actions"
        )
    if not (0 <= action < mdp.vocab_size or action == mdp.pad_token):
        raise ContractViolationError(f"action {action} is not a token of this MDP")
    return State(state.prompt, state.actions + (int(action),))


def pad_complete(mdp: TokenMdp, actions: Sequence[int]) -> Tokens:
    """Fill a (possibly EOS-terminated) prefix up to the horizon with pad"""
    return tuple(int(a) for a in actions) + (mdp.pad_token,) * (mdp.horizon - len(actions))


def _response_content(mdp: TokenMdp, actions: Sequence[int]) -> List[int]:
    content = []
    for a in actions:
        if a == mdp.pad_token or (mdp.eos_token is not None and a == mdp.eos_token):
            break
        content.append(int(a))
    return content


def verify(mdp: TokenMdp, prompt: Union[State, Sequence[int]], actions: Sequence[int]) -> float:
    """Pure rule-based outcome reward in [0, 1]"""
    if len(actions) != mdp.horizon:
        raise ContractViolationError(
            f"verify needs exactly {mdp.horizon} actions, got {len(actions)}"
        )
    prompt_tokens = prompt.prompt if isinstance(prompt, State) else tuple(prompt)
    rule = mdp.reward_rule

    if isinstance(rule, ExactMatch):
        return 1.0 if tuple(actions) == tuple(rule.target) else 0.0
    if isinstance(rule, ChecksumModK):
        total = sum(_response_content(mdp, actions))
        if rule.include_prompt:
            total += sum(prompt_tokens)
        return 1.0 if total % rule.modulus == rule.residue else 0.0
    if isinstance(rule, PrefixCount):
        run = 0
        for a in _response_content(mdp, actions):
            if a != rule.target_token:
                break
            run += 1
        return 1.0 if run >= rule.threshold else 0.0
    if isinstance(rule, Constant):
        return float(rule.value)
    raise ConfigurationError(f"unknown reward rule variant: {type(rule).__name__}")


def spawn_seeds(seed: int, n: int) -> List[int]:
    """Independent per-trajectory seeds derived from one root seed"""
    state = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [int(s) for s in state]


def sample_prompts(mdp: TokenMdp, n: int, rng: np.random.Generator) -> List[State]:
    """Draw n initial states from rho"""
    idx = rng.choice(len(mdp.prompts), size=n, p=mdp.prompt_weights)
    return [State(mdp.prompts[i].tokens) for i in idx]


def rollout(
    mdp: TokenMdp,
    policy: "LogitPolicy",
    prompt: Union[State, Sequence[int]],
    rng_seed: int,
    temperature: float = 1.0,
    collected_at_iter: int = 0,
    traj_id: int = 0,
) -> Trajectory:
    """Sample one pad-completed response from the policy"""
    if temperature <= 0:
        raise ContractViolationError(f"temperature must be positive, got {temperature}")
    prompt_tokens = prompt.prompt if isinstance(prompt, State) else tuple(int(t) for t in prompt)
    if prompt_tokens not in {p.tokens for p in mdp.prompts}:
        raise ContractViolationError(f"prompt {list(prompt_tokens)} is not in the prompt set")

    rng = np.random.default_rng(rng_seed)
    state = State(prompt_tokens)
    actions: List[int] = []
    logprobs: List[float] = []
    num_sampled = mdp.horizon

    for h in range(mdp.horizon):
        if h >= num_sampled:
            actions.append(mdp.pad_token)
            logprobs.append(0.0)
            continue
        log_p = policy.action_log_probs(state, temperature)
        action = int(rng.choice(mdp.vocab_size, p=np.exp(log_p)))
        actions.append(action)
        logprobs.append(float(log_p[action]))
        if mdp.eos_token is not None and action == mdp.eos_token:
            num_sampled = h + 1
        else:
            state = step(mdp, state, action)

    return Trajectory(
        traj_id=traj_id,
        prompt=prompt_tokens,
        actions=tuple(actions),
        behavior_logprobs=tuple(logprobs),
        num_sampled=num_sampled,
        rule_reward=verify(mdp, prompt_tokens, actions),
        collected_at_iter=collected_at_iter,
    )


def rollout_batch(
    mdp: TokenMdp,
    policy: "LogitPolicy",
    prompts: Sequence[State],
    seeds: Sequence[int],
    temperature: float = 1.0,
    collected_at_iter: int = 0,
    first_id: int = 0,
    workers: int = 1,
) -> List[Trajectory]:
    """Rollouts with one seed each; parallel runs equal the sequential run"""
    if len(prompts) != len(seeds):
        raise ContractViolationError("one seed per prompt is required")

    def _one(i: int) -> Trajectory:
        return rollout(
            mdp,
            policy,
            prompts[i],
            seeds[i],
            temperature=temperature,
            collected_at_iter=collected_at_iter,
            traj_id=first_id + i,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, range(len(prompts))))
    return [_one(i) for i in range(len(prompts))]


def avg_at_n(
    mdp: TokenMdp,
    policy: "LogitPolicy",
    prompt: Union[State, Sequence[int]],
    n: int,
    seed: int,
    temperature: float = 1.0,
) -> float:
    """Mean rule reward over n seeded rollouts (avg@n)"""
    if n < 1:
        raise ContractViolationError(f"avg@n needs n >= 1, got {n}")
    rewards = [
        rollout(mdp, policy, prompt, s, temperature=temperature).rule_reward
        for s in spawn_seeds(seed, n)
    ]
    return float(np.mean(rewards))


def decision_states(mdp: TokenMdp, limit: Optional[int] = None) -> List[State]:
    """All reachable non-terminal states, breadth-first per depth"""
    seen = set()
    frontier: List[State] = []
    for state in mdp.prompt_states:
        if state not in seen:
            seen.add(state)
            frontier.append(state)

    states: List[State] = []
    while frontier:
        states.extend(frontier)
        if limit is not None and len(states) > limit:
            raise StateSpaceLimitError(
                f"task '{mdp.name}' has more than {limit} reachable decision states"
            )
        children = []
        for state in frontier:
            for action in range(mdp.vocab_size):
                child = step(mdp, state, action)
                if not is_terminal(mdp, child):
                    children.append(child)
        frontier = children
    return states
