"""
Tests for the FIFO replay buffer and its reuse accounting
"""

import json

import pytest

from errors import ContractViolationError, ReplayError
from replay import ReplayBuffer, expected_reuse


@pytest.fixture
def fill(make_trajectory):
    """Push `rounds` batches of `size` fresh trajectories, one batch per iteration"""

    def _fill(buffer, rounds, size, start_iter=1, sampler=None):
        next_id = buffer.push_count
        for r in range(rounds):
            iteration = start_iter + r
            batch = [
                make_trajectory((0,), (0,), traj_id=next_id + i, iteration=iteration) for i in range(size)
            ]
            next_id += size
            buffer.push_batch(batch)
            if sampler is not None:
                sampler(buffer, iteration)
        return buffer

    return _fill


class TestFifo:
    def test_oldest_evicted_first(self, fill):
        buffer = fill(ReplayBuffer(4), rounds=3, size=2)
        assert buffer.ids == [2, 3, 4, 5]
        assert buffer.eviction_order == [0, 1]
        assert buffer.evict_count == 2
        assert len(buffer) == 4

    def test_residence_is_capacity_over_batch(self, fill):
        buffer = fill(ReplayBuffer(6), rounds=10, size=2)
        assert buffer.residence_log
        assert set(buffer.residence_log) == {3}

    def test_duplicate_ids_rejected(self, make_trajectory):
        buffer = ReplayBuffer(4)
        buffer.push_batch([make_trajectory((0,), (0,), traj_id=1)])
        with pytest.raises(ReplayError):
            buffer.push_batch([make_trajectory((0,), (0,), traj_id=1)])

    def test_evicted_ids_leave_the_histogram(self, fill, make_trajectory):
        buffer = fill(ReplayBuffer(4), rounds=50, size=2)
        assert sorted(buffer.reuse_histogram) == buffer.ids
        assert len(buffer.retired_uses) == 96
        with pytest.raises(ReplayError):
            buffer.push_batch([make_trajectory((0,), (0,), traj_id=0)])

    def test_empty_push_is_noop(self):
        buffer = ReplayBuffer(2)
        assert buffer.push_batch([]) == 0
        assert buffer.push_rounds == 0

    def test_capacity_must_be_positive(self):
        with pytest.raises(ContractViolationError):
            ReplayBuffer(0)


class TestSampling:
    def test_empty_buffer(self):
        with pytest.raises(ReplayError):
            ReplayBuffer(4).sample_uniform(2)

    def test_with_replacement_can_exceed_size(self, fill):
        buffer = fill(ReplayBuffer(4), rounds=1, size=2)
        assert len(buffer.sample_uniform(10, rng_seed=0)) == 10

    def test_without_replacement(self, fill):
        buffer = fill(ReplayBuffer(4, sample_with_replacement=False), rounds=2, size=2)
        drawn = buffer.sample_uniform(4, rng_seed=1)
        assert sorted(t.traj_id for t in drawn) == [0, 1, 2, 3]
        with pytest.raises(ReplayError):
            buffer.sample_uniform(5)

    def test_seeded_draws_repeat(self, fill):
        buffer = fill(ReplayBuffer(8), rounds=4, size=2)
        first = [t.traj_id for t in buffer.sample_uniform(6, rng_seed=5)]
        second = [t.traj_id for t in buffer.sample_uniform(6, rng_seed=5)]
        assert first == second

    def test_sampling_counts_uses(self, fill):
        buffer = fill(ReplayBuffer(4), rounds=1, size=1)
        buffer.sample_uniform(3, rng_seed=0)
        assert buffer.reuse_histogram[0] == 3

    def test_record_use_ignores_unknown_ids(self, fill):
        buffer = fill(ReplayBuffer(4), rounds=1, size=2)
        buffer.record_use([0, 0, 99])
        assert buffer.reuse_histogram == {0: 2, 1: 0}


class TestStaleness:
    def test_fresh_buffer_has_age_zero(self, fill):
        buffer = fill(ReplayBuffer(4), rounds=1, size=4, start_iter=3)
        stats = buffer.staleness_stats(3)
        assert stats.mean_age == 0.0
        assert stats.max_age == 0

    def test_steady_state_age_bound(self, fill):
        buffer = fill(ReplayBuffer(10), rounds=20, size=2)
        assert buffer.staleness_stats(20).max_age <= 5

    def test_empty_buffer(self):
        with pytest.raises(ReplayError):
            ReplayBuffer(4).staleness_stats(0)


class TestReuse:
    def test_expected_reuse_formula(self):
        assert expected_reuse(40, 8, 1) == pytest.approx(1.0)
        assert expected_reuse(10, 4, 2) == pytest.approx(1.6)

    def test_expected_reuse_preconditions(self):
        with pytest.raises(ContractViolationError):
            expected_reuse(4, 8, 1)
        with pytest.raises(ContractViolationError):
            expected_reuse(8, 4, 0)

    def test_empirical_reuse_matches_expected(self, fill):
        def sampler(buffer, iteration):
            for k in range(2):
                buffer.sample_uniform(8, rng_seed=iteration * 10 + k)

        buffer = fill(ReplayBuffer(40), rounds=500, size=8, sampler=sampler)
        assert expected_reuse(40, 8, 2) == pytest.approx(2.0)
        assert buffer.mean_reuse() == pytest.approx(2.0, rel=0.05)
        assert set(buffer.residence_log) == {5}

    def test_mean_reuse_needs_evictions(self, fill):
        buffer = fill(ReplayBuffer(8), rounds=1, size=2)
        with pytest.raises(ReplayError):
            buffer.mean_reuse()
        assert "retired_mean_uses" not in buffer.reuse_summary()

    def test_dump_trajectories(self, fill, tmp_path):
        buffer = fill(ReplayBuffer(4), rounds=3, size=2)
        buffer.record_use([4])
        path = buffer.dump_trajectories(tmp_path / "buffer.jsonl")
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [line["traj_id"] for line in lines] == [2, 3, 4, 5]
        assert lines[2]["uses"] == 1
