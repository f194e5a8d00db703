"""
Pytest configuration and shared fixtures for the ReVal lab tests
"""

import math
import os
from pathlib import Path

import pytest

from token_mdp import ChecksumModK, Constant, ExactMatch, State, TokenMdp, Trajectory


def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line("markers", "integration: marks tests as integration tests")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")


@pytest.fixture(scope="session", autouse=True)
def setup_test_environment():
    """Run from the project root"""
    project_root = Path(__file__).parent.parent
    os.chdir(project_root)
    yield


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    """Every run lands in a per-test directory"""
    root = tmp_path / "runs"
    monkeypatch.setenv("REVAL_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def two_token_mdp():
    """vocab 2, H = 1, one prompt, reward 1 for action 0"""
    return TokenMdp(
        name="two_token",
        vocab_size=2,
        horizon=1,
        prompts=[[0]],
        reward_rule=ExactMatch(target=(0,)),
    )


@pytest.fixture
def toy_mdp():
    """vocab 3 with EOS = 2, H = 3, two prompts, target [1, EOS, pad]"""
    return TokenMdp(
        name="toy",
        vocab_size=3,
        horizon=3,
        prompts=[[0], [1]],
        reward_rule=ExactMatch(target=(1, 2, 3)),
        eos_token=2,
    )


@pytest.fixture
def checksum_mdp():
    return TokenMdp(
        name="checksum",
        vocab_size=4,
        horizon=3,
        prompts=[[1], [2]],
        reward_rule=ChecksumModK(modulus=3, residue=0, include_prompt=True),
    )


@pytest.fixture
def zero_reward_mdp():
    return TokenMdp(
        name="zero",
        vocab_size=3,
        horizon=2,
        prompts=[[0], [1]],
        reward_rule=Constant(value=0.0),
        eos_token=2,
    )


@pytest.fixture
def make_trajectory():
    """Trajectory factory for hand-built batches"""

    def _make(prompt, actions, reward=0.0, traj_id=0, num_sampled=None, logprob=-math.log(2), iteration=0):
        n = len(actions) if num_sampled is None else num_sampled
        return Trajectory(
            traj_id=traj_id,
            prompt=tuple(prompt),
            actions=tuple(actions),
            behavior_logprobs=tuple([logprob] * n + [0.0] * (len(actions) - n)),
            num_sampled=n,
            rule_reward=reward,
            collected_at_iter=iteration,
        )

    return _make


@pytest.fixture
def initial_state():
    return State((0,))
