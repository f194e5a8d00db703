"""
Oracles - exact computations on tiny token MDPs
Versie: 1.0

Backward induction over the finite generation tree gives the soft-optimal
Q-function of the KL-regularized objective, with or without a potential-based
shaping term. Exhaustive enumeration gives exact success rates and exact
sequence-level KL, and brentq tilts a reference policy to a target success
rate for the difficulty-matched one-shot tasks.
"""

import logging
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import brentq
from scipy.special import logsumexp

from errors import ConfigurationError, StateSpaceLimitError
from policy_engine import LogitPolicy, ReferenceSnapshot, TabularPolicy
from token_mdp import (
    ChecksumModK,
    Constant,
    ExactMatch,
    PrefixCount,
    PromptSpec,
    State,
    TokenMdp,
    Tokens,
    decision_states,
    is_terminal,
    pad_complete,
    step,
    verify,
)

logger = logging.getLogger(__name__)

DEFAULT_STATE_LIMIT = 2000

Potential = Callable[[State], float]
RewardFn = Callable[[Tokens, Tokens], float]


# ============================================
# SOFT-OPTIMAL SOLUTION
# ============================================


class SoftOptimalSolution(BaseModel):
    """Exact Q*(s, .) and V*(s) for every decision state"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    beta: float = Field(description="Regularization strength used for r / beta")
    shaped: bool = Field(default=False, description="Computed with a potential-shaped reward")
    q: Dict[State, np.ndarray] = Field(description="Q-values per decision state")
    values: Dict[State, float] = Field(description="V(s) = logsumexp_a Q(s, a)")

    def log_policy(self, state: State) -> np.ndarray:
        q = self.q[state]
        return q - logsumexp(q)

    def policy_probs(self, state: State) -> np.ndarray:
        """pi*(a|s) = exp(Q*(s, a) - V(s))"""
        return np.exp(self.log_policy(state))

    def as_tabular_policy(self, mdp: TokenMdp) -> TabularPolicy:
        """Tabular policy whose logits are exactly these Q-values"""
        policy = TabularPolicy.for_mdp(mdp, state_limit=None)
        for state, q in self.q.items():
            policy.set_logits(state, q)
        return policy


def _reference_log_probs(ref: Union[ReferenceSnapshot, LogitPolicy], state: State) -> np.ndarray:
    policy = ref.policy if isinstance(ref, ReferenceSnapshot) else ref
    return policy.action_log_probs(state)


def reference_potential(ref: Union[ReferenceSnapshot, LogitPolicy]) -> Potential:
    """Phi(s) = V_ref(s), the shaping choice that makes the loss calibrated"""
    policy = ref.policy if isinstance(ref, ReferenceSnapshot) else ref

    def phi(state: State) -> float:
        z = policy.batch_logits([state]).detach().numpy()[0]
        return float(logsumexp(z))

    return phi


def soft_value_iteration_oracle(
    mdp: TokenMdp,
    ref: Union[ReferenceSnapshot, LogitPolicy],
    beta: float,
    potential: Optional[Potential] = None,
    reward_fn: Optional[RewardFn] = None,
    state_limit: Optional[int] = DEFAULT_STATE_LIMIT,
) -> SoftOptimalSolution:
    """Backward induction of Q(s, a) = r_beta(s, a) + Phi(s) - Phi(s') + V(s').

    r_beta(s, a) = log pi_ref(a|s), plus r(tau) / beta on the transition into
    a terminal state. Terminal states have V = 0 and Phi = 0.
    """
    if beta <= 0:
        raise ConfigurationError(f"beta must be positive, got {beta}")
    reward = reward_fn or (lambda prompt, actions: verify(mdp, prompt, actions))
    states = decision_states(mdp, limit=state_limit)

    phi: Dict[State, float] = {}
    if potential is not None:
        phi = {s: float(potential(s)) for s in states}

    q_table: Dict[State, np.ndarray] = {}
    values: Dict[State, float] = {}
    # decision_states is ordered by depth, so children are solved first
    for state in reversed(states):
        q = _reference_log_probs(ref, state).astype(np.float64).copy()
        for action in range(mdp.vocab_size):
            child = step(mdp, state, action)
            if is_terminal(mdp, child):
                q[action] += reward(child.prompt, pad_complete(mdp, child.actions)) / beta
            else:
                q[action] += values[child]
                if potential is not None:
                    q[action] -= phi[child]
        if potential is not None:
            q += phi[state]
        q_table[state] = q
        values[state] = float(logsumexp(q))

    logger.debug(f"soft value iteration on '{mdp.name}': {len(states)} states, beta={beta}")
    return SoftOptimalSolution(beta=beta, shaped=potential is not None, q=q_table, values=values)


class ShapingReport(BaseModel):
    """State-wise comparison of shaped and unshaped soft-optimal policies"""

    passed: bool = Field(description="max_abs_diff <= tolerance")
    max_abs_diff: float = Field(description="Largest |pi_shaped - pi_unshaped| over states and actions")
    states: int = Field(description="Number of states compared")


def shaping_invariance_check(
    mdp: TokenMdp,
    ref: Union[ReferenceSnapshot, LogitPolicy],
    beta: float,
    potential: Optional[Potential] = None,
    tolerance: float = 1e-8,
    state_limit: Optional[int] = DEFAULT_STATE_LIMIT,
) -> ShapingReport:
    """Optimal policies with r_beta and with r_beta + Phi(s) - Phi(s') must agree"""
    plain = soft_value_iteration_oracle(mdp, ref, beta, state_limit=state_limit)
    shaped = soft_value_iteration_oracle(
        mdp, ref, beta, potential=potential or (lambda s: 0.0), state_limit=state_limit
    )
    worst = 0.0
    for state in plain.q:
        diff = np.max(np.abs(plain.policy_probs(state) - shaped.policy_probs(state)))
        worst = max(worst, float(diff))
    return ShapingReport(passed=worst <= tolerance, max_abs_diff=worst, states=len(plain.q))


def reval_fixed_point(
    mdp: TokenMdp,
    ref: ReferenceSnapshot,
    beta: float,
    state_limit: Optional[int] = DEFAULT_STATE_LIMIT,
) -> TabularPolicy:
    """Tabular policy with logits Q*(s, .) + V_ref(s), where the shaped loss vanishes"""
    solution = soft_value_iteration_oracle(
        mdp, ref, beta, potential=reference_potential(ref), state_limit=state_limit
    )
    return solution.as_tabular_policy(mdp)


# ============================================
# ENUMERATION
# ============================================


def enumerate_responses(
    mdp: TokenMdp,
    policy: LogitPolicy,
    prompt: State,
    state_limit: Optional[int] = DEFAULT_STATE_LIMIT,
) -> List[Tuple[Tokens, float]]:
    """Every pad-completed response to one prompt with its exact log-probability"""
    responses: List[Tuple[Tokens, float]] = []
    frontier: List[Tuple[State, float]] = [(State(prompt.prompt), 0.0)]
    visited = 0
    while frontier:
        state, logp = frontier.pop()
        visited += 1
        if state_limit is not None and visited > state_limit:
            raise StateSpaceLimitError(f"more than {state_limit} decision states under {list(prompt.prompt)}")
        log_pi = policy.action_log_probs(state)
        for action in range(mdp.vocab_size):
            child = step(mdp, state, action)
            if is_terminal(mdp, child):
                responses.append((pad_complete(mdp, child.actions), logp + float(log_pi[action])))
            else:
                frontier.append((child, logp + float(log_pi[action])))
    return responses


def exact_success_rate(
    mdp: TokenMdp,
    policy: LogitPolicy,
    prompt: Optional[State] = None,
    state_limit: Optional[int] = DEFAULT_STATE_LIMIT,
) -> float:
    """Expected rule reward under the policy (one prompt or rho-weighted)"""
    prompts = [prompt] if prompt is not None else mdp.prompt_states
    weights = [1.0] if prompt is not None else list(mdp.prompt_weights)
    total = 0.0
    for w, p in zip(weights, prompts):
        for actions, logp in enumerate_responses(mdp, policy, p, state_limit):
            total += w * np.exp(logp) * verify(mdp, p, actions)
    return float(total)


def exact_kl(
    mdp: TokenMdp,
    policy: LogitPolicy,
    ref: Union[ReferenceSnapshot, LogitPolicy],
    state_limit: Optional[int] = DEFAULT_STATE_LIMIT,
) -> float:
    """Sequence-level KL(pi_theta || pi_ref) under rho, by backward recursion"""
    states = decision_states(mdp, limit=state_limit)
    kl: Dict[State, float] = {}
    for state in reversed(states):
        log_pi = policy.action_log_probs(state)
        log_ref = _reference_log_probs(ref, state)
        total = 0.0
        for action in range(mdp.vocab_size):
            child = step(mdp, state, action)
            future = 0.0 if is_terminal(mdp, child) else kl[child]
            total += np.exp(log_pi[action]) * (log_pi[action] - log_ref[action] + future)
        kl[state] = total
    return float(sum(w * kl[s] for w, s in zip(mdp.prompt_weights, mdp.prompt_states)))


# ============================================
# DIFFICULTY CALIBRATION
# ============================================


def target_path(mdp: TokenMdp, prompt: State) -> List[Tuple[State, int]]:
    """(state, action) pairs along the ExactMatch target, up to the pad suffix"""
    rule = mdp.reward_rule
    if not isinstance(rule, ExactMatch):
        raise ConfigurationError("difficulty calibration needs an exact_match task")
    path = []
    state = State(prompt.prompt)
    for action in rule.target:
        if action == mdp.pad_token:
            break
        path.append((state, action))
        if mdp.eos_token is not None and action == mdp.eos_token:
            break
        state = step(mdp, state, action)
    return path


def tilted_reference(mdp: TokenMdp, bias: float, seed: Optional[int] = None) -> TabularPolicy:
    """Zero logits everywhere except +bias on the target action along the target path"""
    policy = TabularPolicy.for_mdp(mdp, seed=seed)
    for prompt in mdp.prompt_states:
        for state, action in target_path(mdp, prompt):
            row = np.zeros(mdp.vocab_size)
            row[action] = bias
            policy.set_logits(state, row)
    return policy


def calibrate_reference(
    mdp: TokenMdp,
    target_rate: float,
    low: float = -20.0,
    high: float = 20.0,
    xtol: float = 1e-10,
) -> Tuple[TabularPolicy, float]:
    """Find the path tilt whose exact success rate equals target_rate (brentq)"""
    if not 0.0 < target_rate < 1.0:
        raise ConfigurationError(f"target success rate must lie in (0, 1), got {target_rate}")

    def gap(bias: float) -> float:
        return exact_success_rate(mdp, tilted_reference(mdp, bias)) - target_rate

    bias = brentq(gap, low, high, xtol=xtol)
    policy = tilted_reference(mdp, bias)
    logger.info(
        f"calibrated '{mdp.name}': tilt {bias:.6f} gives success rate {exact_success_rate(mdp, policy):.4f}"
    )
    return policy, float(bias)


def random_potential(seed: int, scale: float = 1.0) -> Potential:
    """Bounded pseudo-random Phi(s) in [-scale, scale], deterministic per state"""

    def phi(state: State) -> float:
        key = [seed, len(state.prompt), *state.prompt, len(state.actions), *state.actions]
        return float(np.random.default_rng(key).uniform(-scale, scale))

    return phi


def state_count(mdp: TokenMdp, state_limit: Optional[int] = None) -> int:
    return len(decision_states(mdp, limit=state_limit))


def random_tiny_task(seed: int) -> TokenMdp:
    """Random task small enough for exhaustive enumeration (|V| <= 3, H <= 3)"""
    rng = np.random.default_rng(seed)
    vocab = int(rng.integers(2, 4))
    horizon = int(rng.integers(1, 4))
    eos = int(vocab - 1) if rng.random() < 0.5 else None
    content = [t for t in range(vocab) if t != eos]
    # equal prompt lengths keep token sequences unique per state
    prompt_len = int(rng.integers(1, 3))
    drawn = {tuple(int(t) for t in rng.integers(0, vocab, size=prompt_len)) for _ in range(2)}
    prompts = [PromptSpec(tokens=tokens) for tokens in sorted(drawn)]
    kind = rng.choice(["exact_match", "checksum_mod_k", "prefix_count", "constant"])
    if kind == "exact_match":
        length = int(rng.integers(1, horizon + 1)) if eos is not None else horizon
        body = [int(rng.choice(content)) for _ in range(length)]
        if eos is not None and length < horizon:
            body[-1] = eos
        rule = ExactMatch(target=tuple(body) + (vocab,) * (horizon - length))
    elif kind == "checksum_mod_k":
        modulus = int(rng.integers(2, 4))
        rule = ChecksumModK(
            modulus=modulus, residue=int(rng.integers(0, modulus)), include_prompt=bool(rng.random() < 0.5)
        )
    elif kind == "prefix_count":
        rule = PrefixCount(target_token=int(rng.choice(content)), threshold=int(rng.integers(1, horizon + 1)))
    else:
        rule = Constant(value=0.0)
    return TokenMdp(
        name=f"tiny_{seed}",
        vocab_size=vocab,
        horizon=horizon,
        prompts=prompts,
        reward_rule=rule,
        eos_token=eos,
    )


__all__ = [
    "DEFAULT_STATE_LIMIT",
    "ShapingReport",
    "SoftOptimalSolution",
    "calibrate_reference",
    "enumerate_responses",
    "exact_kl",
    "exact_success_rate",
    "random_potential",
    "random_tiny_task",
    "reference_potential",
    "reval_fixed_point",
    "shaping_invariance_check",
    "soft_value_iteration_oracle",
    "state_count",
    "target_path",
    "tilted_reference",
]
