"""
Cost Model - generation-versus-update training time projections
Versie: 1.0

T_total ~= K_generation * T_generation + K_update * T_update. Evaluation,
checkpointing and scheduler overhead are not modeled, so every projection is
a lower bound on wall-clock time.
"""

import logging
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from errors import ContractViolationError

logger = logging.getLogger(__name__)


class CostParams(BaseModel):
    """Per-unit costs and unit counts of one training run"""

    t_generation: float = Field(ge=0.0, description="Time per generation round")
    t_update: float = Field(ge=0.0, description="Time per parameter update")
    k_generation: int = Field(ge=0, description="Number of generation rounds")
    k_update: int = Field(ge=0, description="Number of parameter updates")


def total_time(p: CostParams) -> float:
    return p.k_generation * p.t_generation + p.k_update * p.t_update


def _check_ratio(t_gen: float, t_up: float, ratio: float) -> None:
    if t_gen <= 0 or t_up < 0:
        raise ContractViolationError(f"need T_gen > 0 and T_up >= 0 (got {t_gen}, {t_up})")
    if not 0 < ratio <= 1:
        raise ContractViolationError(f"generation reduction ratio must lie in (0, 1], got {ratio}")


def _profitable(t_gen: float, t_up: float, ratio: float, k: int) -> bool:
    # one on-policy update per round versus k updates per round on fewer rounds
    return ratio * (t_gen + k * t_up) < t_gen + t_up


def breakeven_reuse(t_gen: float, t_up: float, gen_reduction_ratio: float) -> Optional[int]:
    """Smallest K >= 1 whose reduced-generation run beats the on-policy baseline.

    None when no K is profitable (ratio = 1).
    """
    _check_ratio(t_gen, t_up, gen_reduction_ratio)
    return 1 if _profitable(t_gen, t_up, gen_reduction_ratio, 1) else None


def max_profitable_reuse(
    t_gen: float, t_up: float, gen_reduction_ratio: float, k_cap: int = 1_000_000
) -> Optional[int]:
    """Largest profitable K; None when every K is profitable (T_up = 0), 0 when none is"""
    _check_ratio(t_gen, t_up, gen_reduction_ratio)
    if t_up == 0:
        return None if gen_reduction_ratio < 1 else 0
    k = 0
    while k < k_cap and _profitable(t_gen, t_up, gen_reduction_ratio, k + 1):
        k += 1
    return k


class SavingsReport(BaseModel):
    """Baseline versus method projection"""

    baseline_time: float = Field(description="Projected time of the baseline run")
    method_time: float = Field(description="Projected time of the method run")
    savings: float = Field(description="baseline_time - method_time")
    savings_fraction: float = Field(description="savings / baseline_time")
    profitable: bool = Field(description="method_time < baseline_time")
    lower_bound: bool = Field(default=True, description="Overheads are not modeled")


def projected_savings(baseline: CostParams, method: CostParams) -> SavingsReport:
    base = total_time(baseline)
    other = total_time(method)
    return SavingsReport(
        baseline_time=base,
        method_time=other,
        savings=base - other,
        savings_fraction=(base - other) / base if base > 0 else 0.0,
        profitable=other < base,
    )


class CostRow(BaseModel):
    """One line of the cost report"""

    label: str
    k_generation: int
    k_update: int
    projected_time: float
    projected_hours: float
    speedup_vs_baseline: Optional[float] = None
    savings_vs_baseline: Optional[float] = None


def cost_report(
    runs: Sequence[Dict],
    t_gen: float,
    t_up: float,
    baseline_label: Optional[str] = None,
) -> List[CostRow]:
    """Cost rows from measured {label, generation_count, update_count} summaries.

    Times are in seconds; the baseline row (first run unless named) anchors the
    speedup and savings columns.
    """
    if not runs:
        return []
    rows = []
    for run in runs:
        params = CostParams(
            t_generation=t_gen,
            t_update=t_up,
            k_generation=int(run["generation_count"]),
            k_update=int(run["update_count"]),
        )
        t = total_time(params)
        rows.append(
            CostRow(
                label=str(run["label"]),
                k_generation=params.k_generation,
                k_update=params.k_update,
                projected_time=t,
                projected_hours=t / 3600.0,
            )
        )

    baseline = next((r for r in rows if r.label == baseline_label), rows[0])
    for row in rows:
        if row.projected_time > 0:
            row.speedup_vs_baseline = baseline.projected_time / row.projected_time
        row.savings_vs_baseline = baseline.projected_time - row.projected_time
    logger.debug(f"cost report: {len(rows)} rows, baseline '{baseline.label}'")
    return rows
