"""
Replay - bounded FIFO trajectory buffer with uniform sampling
Versie: 1.0

Trajectories enter in batches, leave oldest-first once the capacity M is
exceeded, and are drawn uniformly for off-policy updates. The buffer counts how
often every trajectory was used so the long-run reuse can be compared with
floor(M/B) * (B/M) * K.
"""

import json
import logging
from collections import deque
from pathlib import Path
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np
from pydantic import BaseModel, Field

from errors import ContractViolationError, ReplayError
from token_mdp import Trajectory

logger = logging.getLogger(__name__)


class StalenessStats(BaseModel):
    """Age of the buffer contents in iterations"""

    mean_age: float = Field(description="Mean of current_iter - collected_at_iter")
    max_age: int = Field(description="Oldest trajectory age")
    size: int = Field(description="Number of trajectories inspected")


def expected_reuse(capacity: int, batch_size: int, updates_per_generation: int) -> float:
    """floor(M/B) * (B/M) * K: expected number of updates that see one trajectory"""
    if not capacity >= batch_size >= 1 or updates_per_generation < 1:
        raise ContractViolationError(
            f"expected_reuse needs M >= B >= 1 and K >= 1 (M={capacity}, B={batch_size}, K={updates_per_generation})"
        )
    return (capacity // batch_size) * (batch_size / capacity) * updates_per_generation


class ReplayBuffer:
    """FIFO store of trajectories with reuse accounting"""

    def __init__(
        self,
        capacity: int,
        seed: Optional[int] = None,
        sample_with_replacement: bool = True,
    ):
        if capacity < 1:
            raise ContractViolationError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.sample_with_replacement = sample_with_replacement
        self.store: Deque[Trajectory] = deque()
        self.push_count = 0
        self.evict_count = 0
        self.push_rounds = 0
        # uses of live trajectories; evicted counts move to retired_uses
        self.reuse_histogram: Dict[int, int] = {}
        self._seen_ids: Set[int] = set()
        self.residence_log: List[int] = []
        self.retired_uses: List[int] = []
        self.eviction_order: List[int] = []
        self._pushed_in_round: Dict[int, int] = {}
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.store)

    @property
    def ids(self) -> List[int]:
        return [t.traj_id for t in self.store]

    def push_batch(self, batch: Sequence[Trajectory]) -> int:
        """Append a batch and evict the oldest overflow; returns the eviction count"""
        if not batch:
            return 0
        new_ids = [t.traj_id for t in batch]
        if len(set(new_ids)) != len(new_ids) or any(i in self._seen_ids for i in new_ids):
            raise ReplayError("trajectory ids pushed to the buffer must be unique")

        self.push_rounds += 1
        for traj in batch:
            self.store.append(traj)
            self.reuse_histogram[traj.traj_id] = 0
            self._seen_ids.add(traj.traj_id)
            self._pushed_in_round[traj.traj_id] = self.push_rounds
        self.push_count += len(batch)

        evicted = 0
        while len(self.store) > self.capacity:
            old = self.store.popleft()
            self.eviction_order.append(old.traj_id)
            self.residence_log.append(self.push_rounds - self._pushed_in_round.pop(old.traj_id))
            self.retired_uses.append(self.reuse_histogram.pop(old.traj_id))
            evicted += 1
        self.evict_count += evicted
        if evicted:
            logger.debug(f"buffer evicted {evicted} trajectories (size {len(self.store)})")
        return evicted

    def sample_uniform(self, n: int, rng_seed: Optional[int] = None) -> List[Trajectory]:
        """n uniform draws over the current contents (with replacement by default)"""
        if not self.store:
            raise ReplayError("cannot sample from an empty replay buffer")
        if n < 1:
            return []
        rng = self._rng if rng_seed is None else np.random.default_rng(rng_seed)
        if self.sample_with_replacement:
            idx = rng.integers(0, len(self.store), size=n)
        else:
            if n > len(self.store):
                raise ReplayError(
                    f"cannot draw {n} distinct trajectories from a buffer of {len(self.store)}"
                )
            idx = rng.choice(len(self.store), size=n, replace=False)
        batch = [self.store[int(i)] for i in idx]
        self.record_use(t.traj_id for t in batch)
        return batch

    def record_use(self, ids: Iterable[int]) -> None:
        """Count one use per id (on-policy updates call this for the fresh batch)"""
        for traj_id in ids:
            if traj_id in self.reuse_histogram:
                self.reuse_histogram[traj_id] += 1

    def staleness_stats(self, current_iter: int) -> StalenessStats:
        if not self.store:
            raise ReplayError("staleness of an empty buffer is undefined")
        ages = np.array([current_iter - t.collected_at_iter for t in self.store])
        return StalenessStats(mean_age=float(ages.mean()), max_age=int(ages.max()), size=len(ages))

    def mean_reuse(self) -> float:
        """Average number of uses over evicted trajectories (completed lifetimes)"""
        if not self.retired_uses:
            raise ReplayError("no trajectory has been evicted yet")
        return float(np.mean(self.retired_uses))

    def reuse_summary(self) -> Dict[str, float]:
        """Compact reuse figures for the metrics stream"""
        live = [self.reuse_histogram[t.traj_id] for t in self.store]
        summary = {
            "size": len(self.store),
            "push_count": self.push_count,
            "evict_count": self.evict_count,
            "live_mean_uses": float(np.mean(live)) if live else 0.0,
        }
        if self.retired_uses:
            summary["retired_mean_uses"] = self.mean_reuse()
        return summary

    def dump_trajectories(self, path: Union[str, Path]) -> Path:
        """Write the buffer contents as JSON lines, oldest first"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for traj in self.store:
                record = traj.model_dump(mode="json")
                record["uses"] = self.reuse_histogram[traj.traj_id]
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
        logger.info(f"buffer dump: {len(self.store)} trajectories -> {path}")
        return path
