"""
Tests for the generation-versus-update cost projections
"""

import pytest

from cost_model import (
    CostParams,
    breakeven_reuse,
    cost_report,
    max_profitable_reuse,
    projected_savings,
    total_time,
)
from errors import ContractViolationError

T_GEN = 36.8
T_UP = 2.8
RATIO = 470 / 580


def _params(k_generation, k_update):
    return CostParams(t_generation=T_GEN, t_update=T_UP, k_generation=k_generation, k_update=k_update)


class TestTotalTime:
    def test_on_policy_projection(self):
        total = total_time(_params(580, 580))
        assert total == pytest.approx(22968.0)
        assert total / 3600 == pytest.approx(6.38, abs=0.01)

    def test_no_updates(self):
        assert total_time(_params(580, 0)) == pytest.approx(580 * T_GEN)

    def test_linear_in_updates(self):
        assert total_time(_params(580, 1160)) - total_time(_params(580, 580)) == pytest.approx(580 * T_UP)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            _params(-1, 0)


class TestBreakeven:
    def test_any_reduction_makes_k1_profitable(self):
        assert breakeven_reuse(T_GEN, T_UP, RATIO) == 1

    def test_no_reduction_never_profitable(self):
        assert breakeven_reuse(T_GEN, T_UP, 1.0) is None
        assert max_profitable_reuse(T_GEN, T_UP, 1.0) == 0

    def test_largest_profitable_reuse(self):
        assert max_profitable_reuse(T_GEN, T_UP, RATIO) == 4

    def test_free_updates(self):
        assert max_profitable_reuse(T_GEN, 0.0, RATIO) is None

    @pytest.mark.parametrize("ratio", [0.0, 1.5, -0.2])
    def test_ratio_out_of_range(self, ratio):
        with pytest.raises(ContractViolationError):
            breakeven_reuse(T_GEN, T_UP, ratio)

    def test_generation_time_must_be_positive(self):
        with pytest.raises(ContractViolationError):
            max_profitable_reuse(0.0, T_UP, RATIO)


class TestSavings:
    def test_reduced_generation_with_two_updates(self):
        report = projected_savings(_params(580, 580), _params(470, 940))
        assert report.method_time == pytest.approx(19928.0)
        assert report.savings == pytest.approx(3040.0)
        assert report.profitable
        assert report.lower_bound

    def test_eight_updates_cost_more(self):
        report = projected_savings(_params(580, 580), _params(470, 470 * 8))
        assert not report.profitable
        assert report.savings < 0

    def test_zero_baseline(self):
        report = projected_savings(_params(0, 0), _params(0, 0))
        assert report.savings_fraction == 0.0


class TestCostReport:
    def test_rows_against_named_baseline(self):
        runs = [
            {"label": "reval_step2", "generation_count": 470, "update_count": 940},
            {"label": "grpo_step1", "generation_count": 580, "update_count": 580},
        ]
        rows = cost_report(runs, T_GEN, T_UP, baseline_label="grpo_step1")
        by_label = {row.label: row for row in rows}
        assert by_label["grpo_step1"].speedup_vs_baseline == pytest.approx(1.0)
        assert by_label["reval_step2"].speedup_vs_baseline == pytest.approx(22968.0 / 19928.0)
        assert by_label["reval_step2"].savings_vs_baseline == pytest.approx(3040.0)
        assert by_label["grpo_step1"].projected_hours == pytest.approx(22968.0 / 3600.0)

    def test_first_row_is_default_baseline(self):
        runs = [
            {"label": "a", "generation_count": 10, "update_count": 10},
            {"label": "b", "generation_count": 5, "update_count": 20},
        ]
        rows = cost_report(runs, T_GEN, T_UP)
        assert rows[0].savings_vs_baseline == 0.0
        assert rows[1].savings_vs_baseline == pytest.approx(5 * T_GEN - 10 * T_UP)

    def test_empty(self):
        assert cost_report([], T_GEN, T_UP) == []
