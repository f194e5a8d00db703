"""
Policy Engine - logit-parameterized policies whose logits double as Q-values
Versie: 1.0

Tabular and tiny feed-forward policies over a flat float64 parameter vector,
soft values, action and trajectory log-probabilities, gradients through
torch.autograd, a central finite-difference checker and policy files.
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigurationError, ContractViolationError, NumericAbortError
from token_mdp import State, TokenMdp, Tokens, Trajectory, decision_states

logger = logging.getLogger(__name__)

DTYPE = torch.float64

ScalarFn = Callable[[torch.Tensor], torch.Tensor]


# ============================================
# POLICIES
# ============================================


class LogitPolicy(ABC):
    """Map from state to a logit vector over the vocabulary.

    Q_theta(s, a) is logit_theta(s, a); there is no separate value head.
    Every evaluation accepts an optional `theta` so gradients and finite
    differences can run against a perturbed copy of the parameters.
    """

    kind: str = "abstract"

    def __init__(
        self,
        vocab_size: int,
        theta: Optional[Union[np.ndarray, torch.Tensor, Sequence[float]]] = None,
        seed: Optional[int] = None,
    ):
        if vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be at least 2, got {vocab_size}")
        self.vocab_size = vocab_size
        self.seed = seed
        if theta is None:
            values = torch.zeros(self.num_params, dtype=DTYPE)
        elif isinstance(theta, torch.Tensor):
            values = theta.detach().to(DTYPE).clone()
        else:
            values = torch.as_tensor(np.asarray(theta, dtype=np.float64)).to(DTYPE).clone()
        if values.shape != (self.num_params,):
            raise ConfigurationError(
                f"{self.kind} policy expects {self.num_params} parameters, got {tuple(values.shape)}"
            )
        self.theta = values.requires_grad_(True)

    @property
    @abstractmethod
    def num_params(self) -> int:
        """Length of the flat parameter vector"""

    @abstractmethod
    def batch_logits(
        self, states: Sequence[State], theta: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Logits for a batch of states, shape [len(states), vocab_size]"""

    @abstractmethod
    def header(self) -> Dict[str, Any]:
        """Metadata written in front of the parameter file"""

    @abstractmethod
    def with_params(self, theta: Union[np.ndarray, torch.Tensor]) -> "LogitPolicy":
        """Same architecture, new parameters"""

    def clone(self) -> "LogitPolicy":
        return self.with_params(self.theta.detach().clone())

    def params(self) -> np.ndarray:
        return self.theta.detach().numpy().copy()

    def load_params(self, values: Union[np.ndarray, torch.Tensor]) -> None:
        """Overwrite the parameters in place (keeps optimizer references valid)"""
        with torch.no_grad():
            self.theta.copy_(torch.as_tensor(np.asarray(values, dtype=np.float64)))

    def action_log_probs(self, state: State, temperature: float = 1.0) -> np.ndarray:
        """Sampling distribution at one state as log-probabilities"""
        with torch.no_grad():
            z = self.batch_logits([state])[0] / temperature
            return (z - torch.logsumexp(z, dim=0)).numpy()


class TabularPolicy(LogitPolicy):
    """Context-keyed table of logit vectors plus a default row for unseen contexts"""

    kind = "tabular"

    def __init__(
        self,
        vocab_size: int,
        contexts: Sequence[Sequence[int]],
        theta=None,
        seed: Optional[int] = None,
    ):
        self.contexts: List[Tokens] = [tuple(int(t) for t in c) for c in contexts]
        self.index: Dict[Tokens, int] = {}
        for i, context in enumerate(self.contexts):
            if context in self.index:
                raise ConfigurationError(f"duplicate tabular context {list(context)}")
            self.index[context] = i
        super().__init__(vocab_size, theta=theta, seed=seed)

    @classmethod
    def for_mdp(
        cls,
        mdp: TokenMdp,
        scale: float = 0.0,
        seed: Optional[int] = None,
        state_limit: Optional[int] = 100_000,
    ) -> "TabularPolicy":
        """One row per reachable decision state; logits ~ N(0, scale^2) or zeros"""
        contexts: List[Tokens] = []
        known = set()
        for state in decision_states(mdp, limit=state_limit):
            if state.tokens not in known:
                known.add(state.tokens)
                contexts.append(state.tokens)
        n = (len(contexts) + 1) * mdp.vocab_size
        theta = np.zeros(n)
        if scale > 0:
            theta[: len(contexts) * mdp.vocab_size] = (
                np.random.default_rng(seed).normal(0.0, scale, size=len(contexts) * mdp.vocab_size)
            )
        logger.debug(f"tabular policy for '{mdp.name}': {len(contexts)} contexts, {n} params")
        return cls(mdp.vocab_size, contexts, theta=theta, seed=seed)

    @property
    def num_params(self) -> int:
        return (len(self.contexts) + 1) * self.vocab_size

    @property
    def default_row(self) -> int:
        return len(self.contexts)

    def row_index(self, state: Union[State, Sequence[int]]) -> int:
        tokens = state.tokens if isinstance(state, State) else tuple(state)
        return self.index.get(tokens, self.default_row)

    def table(self, theta: Optional[torch.Tensor] = None) -> torch.Tensor:
        theta = self.theta if theta is None else theta
        return theta.view(len(self.contexts) + 1, self.vocab_size)

    def batch_logits(self, states, theta=None):
        rows = torch.tensor([self.row_index(s) for s in states], dtype=torch.long)
        return self.table(theta)[rows]

    def set_logits(self, state: Union[State, Sequence[int]], values: Sequence[float]) -> None:
        row = self.row_index(state)
        with torch.no_grad():
            self.table()[row] = torch.as_tensor(np.asarray(values, dtype=np.float64))

    def set_default_logits(self, values: Sequence[float]) -> None:
        with torch.no_grad():
            self.table()[self.default_row] = torch.as_tensor(np.asarray(values, dtype=np.float64))

    def analytic_grad_soft_value(self, state: State) -> np.ndarray:
        """d V(s) / d theta = softmax(logits(s)) on the row of s"""
        grad = np.zeros(self.num_params)
        row = self.row_index(state)
        probs = np.exp(self.action_log_probs(state))
        grad[row * self.vocab_size : (row + 1) * self.vocab_size] = probs
        return grad

    def analytic_grad_logprob(self, state: State, action: int) -> np.ndarray:
        """d log pi(a|s) / d theta = one_hot(a) - softmax(logits(s)) on the row of s"""
        grad = -self.analytic_grad_soft_value(state)
        grad[self.row_index(state) * self.vocab_size + action] += 1.0
        return grad

    def header(self):
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "num_params": self.num_params,
            "seed": self.seed,
            "contexts": [list(c) for c in self.contexts],
        }

    def with_params(self, theta):
        return TabularPolicy(self.vocab_size, self.contexts, theta=theta, seed=self.seed)


class TinyNetPolicy(LogitPolicy):
    """One tanh hidden layer over positional one-hot features.

    Features: one-hot of each of the last min(window, len) context tokens
    (one slot per position, right aligned) followed by a one-hot of the step
    index 0..H.
    """

    kind = "tinynet"

    def __init__(
        self,
        vocab_size: int,
        horizon: int,
        hidden: int = 16,
        window: int = 4,
        theta=None,
        seed: Optional[int] = None,
    ):
        self.horizon = horizon
        self.hidden = hidden
        self.window = window
        self._feature_cache: Dict[Tuple[Tokens, int], np.ndarray] = {}
        super().__init__(vocab_size, theta=theta, seed=seed)

    @classmethod
    def initialize(
        cls,
        mdp: TokenMdp,
        hidden: int = 16,
        window: int = 4,
        scale: float = 1.0,
        seed: Optional[int] = None,
    ) -> "TinyNetPolicy":
        """Scaled normal weights; scale 0 gives the all-zero (uniform) network"""
        policy = cls(mdp.vocab_size, mdp.horizon, hidden=hidden, window=window, seed=seed)
        if scale > 0:
            rng = np.random.default_rng(seed)
            w1, b1, w2, b2 = policy._shapes()
            theta = np.concatenate(
                [
                    rng.normal(0.0, scale / np.sqrt(w1[1]), size=w1).ravel(),
                    np.zeros(b1),
                    rng.normal(0.0, scale / np.sqrt(w2[1]), size=w2).ravel(),
                    np.zeros(b2),
                ]
            )
            policy.load_params(theta)
        return policy

    @property
    def feature_dim(self) -> int:
        return self.window * self.vocab_size + self.horizon + 1

    def _shapes(self):
        return (
            (self.hidden, self.feature_dim),
            self.hidden,
            (self.vocab_size, self.hidden),
            self.vocab_size,
        )

    @property
    def num_params(self) -> int:
        return self.hidden * self.feature_dim + self.hidden + self.vocab_size * self.hidden + self.vocab_size

    def features(self, state: State) -> np.ndarray:
        key = (state.tokens, state.step)
        cached = self._feature_cache.get(key)
        if cached is not None:
            return cached
        x = np.zeros(self.feature_dim)
        recent = state.tokens[-self.window :]
        offset = self.window - len(recent)
        for slot, token in enumerate(recent):
            if not 0 <= token < self.vocab_size:
                raise ContractViolationError(f"token {token} has no feature slot")
            x[(offset + slot) * self.vocab_size + token] = 1.0
        x[self.window * self.vocab_size + min(state.step, self.horizon)] = 1.0
        self._feature_cache[key] = x
        return x

    def unpack(self, theta: Optional[torch.Tensor] = None):
        theta = self.theta if theta is None else theta
        w1_shape, b1_size, w2_shape, b2_size = self._shapes()
        i = 0
        w1 = theta[i : i + w1_shape[0] * w1_shape[1]].view(*w1_shape)
        i += w1_shape[0] * w1_shape[1]
        b1 = theta[i : i + b1_size]
        i += b1_size
        w2 = theta[i : i + w2_shape[0] * w2_shape[1]].view(*w2_shape)
        i += w2_shape[0] * w2_shape[1]
        b2 = theta[i : i + b2_size]
        return w1, b1, w2, b2

    def batch_logits(self, states, theta=None):
        w1, b1, w2, b2 = self.unpack(theta)
        x = torch.as_tensor(np.stack([self.features(s) for s in states]))
        hidden = torch.tanh(x @ w1.T + b1)
        return hidden @ w2.T + b2

    def header(self):
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "horizon": self.horizon,
            "hidden": self.hidden,
            "window": self.window,
            "num_params": self.num_params,
            "seed": self.seed,
        }

    def with_params(self, theta):
        return TinyNetPolicy(
            self.vocab_size,
            self.horizon,
            hidden=self.hidden,
            window=self.window,
            theta=theta,
            seed=self.seed,
        )


# ============================================
# POLICY QUANTITIES
# ============================================


def logits(policy: LogitPolicy, state: State, theta: Optional[torch.Tensor] = None) -> torch.Tensor:
    return policy.batch_logits([state], theta)[0]


def soft_value(policy: LogitPolicy, state: State, theta: Optional[torch.Tensor] = None) -> torch.Tensor:
    """V(s) = logsumexp_a Q(s, a), max-shifted by torch.logsumexp"""
    return torch.logsumexp(logits(policy, state, theta), dim=-1)


def logprob_action(
    policy: LogitPolicy,
    state: State,
    action: int,
    theta: Optional[torch.Tensor] = None,
    pad_token: Optional[int] = None,
) -> torch.Tensor:
    """log pi(a|s) = Q(s, a) - V(s); the forced pad action has log-prob 0.

    pad_token defaults to vocab_size, the TokenMdp default.
    """
    pad = policy.vocab_size if pad_token is None else pad_token
    if action == pad:
        return torch.zeros((), dtype=DTYPE)
    if not 0 <= action < policy.vocab_size:
        raise ContractViolationError(
            f"action id {action} outside [0, {policy.vocab_size}) and not the pad token {pad}"
        )
    z = logits(policy, state, theta)
    return z[action] - torch.logsumexp(z, dim=-1)


def batch_trajectory_terms(
    policy: LogitPolicy,
    batch: Sequence[Trajectory],
    theta: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(log pi(tau), V(s1)) for every trajectory with one forward pass.

    The per-trajectory sums are accumulated with index_add in a fixed order so
    the reduction is deterministic.
    """
    step_states: List[State] = []
    step_actions: List[int] = []
    owners: List[int] = []
    for i, traj in enumerate(batch):
        for state, action in traj.steps():
            step_states.append(state)
            step_actions.append(action)
            owners.append(i)

    initial = policy.batch_logits([traj.initial_state for traj in batch], theta)
    initial_values = torch.logsumexp(initial, dim=-1)

    logprob_sums = torch.zeros(len(batch), dtype=DTYPE)
    if step_states:
        z = policy.batch_logits(step_states, theta)
        log_pi = z - torch.logsumexp(z, dim=-1, keepdim=True)
        picked = log_pi.gather(1, torch.tensor(step_actions, dtype=torch.long).unsqueeze(1)).squeeze(1)
        logprob_sums = logprob_sums.index_add(0, torch.tensor(owners, dtype=torch.long), picked)
    return logprob_sums, initial_values


def logprob_trajectory(
    policy: LogitPolicy, traj: Trajectory, theta: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """log pi(tau) = sum of log pi(a_h|s_h) over the non-pad steps"""
    logprob_sums, _ = batch_trajectory_terms(policy, [traj], theta)
    return logprob_sums[0]


# ============================================
# GRADIENTS
# ============================================


class GradVector(BaseModel):
    """Gradient aligned with the flat parameters plus the scalar it belongs to"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(description="d loss / d theta")
    loss: float = Field(description="Scalar value at theta")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


class FiniteDiffReport(BaseModel):
    """Outcome of a central finite-difference comparison"""

    max_relative_error: float = Field(description="Worst relative error over checked coordinates")
    passed: bool = Field(description="max_relative_error <= rel_tol")
    checked: int = Field(description="Number of coordinates compared")
    worst_index: Optional[int] = Field(default=None, description="Coordinate of the worst error")


def grad(policy: LogitPolicy, scalar_fn: ScalarFn) -> GradVector:
    """Reverse-mode gradient of scalar_fn(theta) at the policy parameters"""
    theta = policy.theta.detach().clone().requires_grad_(True)
    value = scalar_fn(theta)
    loss = float(value.detach())
    if not np.isfinite(loss):
        raise NumericAbortError(f"non-finite scalar {loss} while computing a gradient")
    if not value.requires_grad:
        return GradVector(values=np.zeros(policy.num_params), loss=loss)

    (g,) = torch.autograd.grad(value, theta, allow_unused=True)
    values = np.zeros(policy.num_params) if g is None else g.detach().numpy().copy()
    if not np.all(np.isfinite(values)):
        raise NumericAbortError("non-finite gradient entries")
    return GradVector(values=values, loss=loss)


def finite_diff_check(
    policy: LogitPolicy,
    scalar_fn: ScalarFn,
    epsilon: float = 1e-5,
    rel_tol: float = 1e-4,
    gradient: Optional[np.ndarray] = None,
) -> FiniteDiffReport:
    """Compare a gradient against central differences coordinate by coordinate.

    Coordinates where both the gradient and the difference quotient are
    below 1e-8 are skipped; the relative error uses a 1e-3 scale floor.
    """
    if epsilon <= 0:
        raise ContractViolationError(f"epsilon must be positive, got {epsilon}")
    g = grad(policy, scalar_fn).values if gradient is None else np.asarray(gradient, dtype=np.float64)

    base = policy.theta.detach().clone()
    fd = np.zeros(policy.num_params)
    with torch.no_grad():
        for i in range(policy.num_params):
            plus = base.clone()
            plus[i] += epsilon
            minus = base.clone()
            minus[i] -= epsilon
            fd[i] = (float(scalar_fn(plus)) - float(scalar_fn(minus))) / (2.0 * epsilon)

    mask = (np.abs(g) > 1e-8) | (np.abs(fd) > 1e-8)
    if not mask.any():
        return FiniteDiffReport(max_relative_error=0.0, passed=True, checked=0)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-3)
    rel = np.where(mask, rel, 0.0)
    worst = int(np.argmax(rel))
    return FiniteDiffReport(
        max_relative_error=float(rel[worst]),
        passed=bool(rel[worst] <= rel_tol),
        checked=int(mask.sum()),
        worst_index=worst,
    )


# ============================================
# REFERENCE POLICY
# ============================================


class ReferenceSnapshot(BaseModel):
    """Frozen copy of a policy's parameters tagged with its snapshot iteration"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    policy: LogitPolicy = Field(description="Detached copy, never updated")
    snapshot_iter: int = Field(default=0, description="Iteration at which the copy was taken")

    @classmethod
    def take(cls, policy: LogitPolicy, iteration: int = 0) -> "ReferenceSnapshot":
        frozen = policy.clone()
        frozen.theta.requires_grad_(False)
        return cls(policy=frozen, snapshot_iter=iteration)


def kl_to_reference(
    policy: LogitPolicy, ref: ReferenceSnapshot, trajectories: Sequence[Trajectory]
) -> float:
    """Sampled sequence-level KL: mean of log pi_theta(tau) - log pi_ref(tau)"""
    if not trajectories:
        raise ContractViolationError("kl_to_reference needs a nonempty batch")
    with torch.no_grad():
        log_theta, _ = batch_trajectory_terms(policy, trajectories)
        log_ref, _ = batch_trajectory_terms(ref.policy, trajectories)
        return float(torch.mean(log_theta - log_ref))


# ============================================
# POLICY FILES
# ============================================


def save_policy(
    policy: LogitPolicy, path: Union[str, Path], snapshot_iter: Optional[int] = None
) -> Path:
    """Flat parameter file: one JSON header line, one value per line (%.17g)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = policy.header()
    if snapshot_iter is not None:
        header["snapshot_iter"] = snapshot_iter
    np.savetxt(path, policy.params(), fmt="%.17g", header=json.dumps(header), comments="# ")
    return path


def load_policy(path: Union[str, Path]) -> Tuple[LogitPolicy, Dict[str, Any]]:
    """Inverse of save_policy; returns the policy and its header"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith("# "):
        raise ConfigurationError(f"{path} has no policy header")
    header = json.loads(first[2:])
    theta = np.loadtxt(path, dtype=np.float64, ndmin=1)

    kind = header.get("kind")
    if kind == TabularPolicy.kind:
        policy: LogitPolicy = TabularPolicy(
            header["vocab_size"], header["contexts"], theta=theta, seed=header.get("seed")
        )
    elif kind == TinyNetPolicy.kind:
        policy = TinyNetPolicy(
            header["vocab_size"],
            header["horizon"],
            hidden=header["hidden"],
            window=header["window"],
            theta=theta,
            seed=header.get("seed"),
        )
    else:
        raise ConfigurationError(f"unknown policy kind '{kind}' in {path}")
    return policy, header
