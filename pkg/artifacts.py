"""
Artifacts - run directories, metrics streams, manifests and summaries
Versie: 1.0

Layout per preset run:

    <root>/<preset>/<point>/seed_<s>/metrics.jsonl
                                     manifest.json
                                     summary.json
                                     checkpoints/      (optional)
                                     buffer.jsonl      (optional)
    <root>/<preset>/aggregate.csv
    <root>/<preset>/curves.csv
"""

import csv
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from config import RunSpec
from errors import MissingArtifactError
from trainer import MetricsRecord

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"

SUMMARY_METRICS = [
    "rounds_to_threshold",
    "final_avg",
    "final_kl_sampled",
    "final_kl_exact",
    "max_kl_sampled",
    "final_loss",
    "mean_reuse",
    "generation_count",
    "update_count",
]


# ============================================
# PER-RUN FILES
# ============================================


def run_directory(root: Union[str, Path], preset: str, point: str, seed: int) -> Path:
    return Path(root) / preset / point / f"seed_{seed}"


class MetricsWriter:
    """JSON-lines sink, one record per update; usable as a train() sink"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = None
        self.count = 0

    def __enter__(self) -> "MetricsWriter":
        self._file = open(self.path, "w", encoding="utf-8")
        return self

    def __exit__(self, *exc) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __call__(self, record: MetricsRecord) -> None:
        self._file.write(json.dumps(record.model_dump(mode="json"), ensure_ascii=False) + "\n")
        self._file.flush()
        self.count += 1


def read_metrics(path: Union[str, Path]) -> List[MetricsRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing metrics file {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [MetricsRecord.model_validate_json(line) for line in f if line.strip()]


def write_manifest(directory: Path, spec: RunSpec, code_version: str) -> Path:
    """Everything needed to replay the run, defaults included"""
    path = Path(directory) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "preset": spec.preset,
        "point": spec.point,
        "seed": spec.seed,
        "config_hash": spec.config_hash,
        "code_version": code_version,
        "created_at": datetime.now().isoformat(),
        "config": spec.config,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    return path


def load_manifest(path: Union[str, Path]) -> RunSpec:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.is_file():
        raise MissingArtifactError(f"missing manifest {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return RunSpec(preset=data["preset"], point=data["point"], seed=data["seed"], config=data["config"])


class RunSummary(BaseModel):
    """Final figures of one (point, seed) run"""

    preset: str
    point: str
    seed: int
    status: str = Field(default="ok", description="ok | aborted")
    method: str = Field(description="Objective kind")
    step: int = Field(description="Updates per generation K")
    beta: float
    reset_period: int
    reward_transform: str
    threshold: float
    generation_count: int = 0
    update_count: int = 0
    initial_avg: Optional[float] = None
    final_avg: Optional[float] = None
    rounds_to_threshold: Optional[int] = None
    final_loss: Optional[float] = None
    final_kl_sampled: Optional[float] = None
    final_kl_exact: Optional[float] = None
    max_kl_sampled: Optional[float] = None
    mean_reuse: Optional[float] = None
    expected_reuse: Optional[float] = None
    config_hash: str = ""
    message: Optional[str] = None


def write_summary(directory: Path, summary: RunSummary) -> Path:
    path = Path(directory) / SUMMARY_FILE
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary.model_dump(mode="json"), f, indent=2, ensure_ascii=False)
    return path


def read_summary(directory: Path) -> RunSummary:
    path = Path(directory) / SUMMARY_FILE
    if not path.is_file():
        raise MissingArtifactError(f"missing summary {path}")
    with open(path, "r", encoding="utf-8") as f:
        return RunSummary.model_validate(json.load(f))


def write_csv(path: Union[str, Path], rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: "" if row.get(c) is None else row.get(c) for c in columns})
    return path


# ============================================
# PRESET-LEVEL CSV
# ============================================


def aggregate_rows(summaries: Iterable[RunSummary]) -> List[Dict[str, Any]]:
    rows = []
    for s in summaries:
        row = s.model_dump()
        row[f"rounds_to_{s.threshold:g}"] = s.rounds_to_threshold
        rows.append(row)
    return rows


def aggregate_columns(threshold: float) -> List[str]:
    return [
        "point",
        "method",
        "step",
        "beta",
        "reset_period",
        "reward_transform",
        "seed",
        f"rounds_to_{threshold:g}",
        "final_avg",
        "final_kl_sampled",
        "final_kl_exact",
        "max_kl_sampled",
        "generation_count",
        "update_count",
        "mean_reuse",
        "expected_reuse",
        "status",
    ]


CURVE_COLUMNS = [
    "point",
    "seed",
    "iteration",
    "update_index",
    "generation_count",
    "update_count",
    "loss",
    "grad_norm",
    "kl_to_ref",
    "kl_exact",
    "avg_at_n",
    "fresh_reward_mean",
    "reference_reset",
]


def curve_rows(point: str, seed: int, records: Iterable[MetricsRecord]) -> List[Dict[str, Any]]:
    rows = []
    for record in records:
        if record.status != "ok":
            continue
        row = record.model_dump()
        row["point"] = point
        row["seed"] = seed
        rows.append(row)
    return rows


# ============================================
# SUMMARIES ACROSS RUNS
# ============================================


class PointSummary(BaseModel):
    """Seed medians and interquartile ranges of one sweep point"""

    preset: str
    point: str
    seeds: int
    median: Dict[str, Optional[float]] = Field(default_factory=dict)
    iqr: Dict[str, Optional[float]] = Field(default_factory=dict)
    speedup: Optional[float] = Field(
        default=None, description="Baseline median rounds / this point's median rounds"
    )


class Failure(BaseModel):
    path: str
    reason: str


class CheckResult(BaseModel):
    preset: str
    point: str
    metric: str
    op: str
    value: float
    observed: Optional[float]
    passed: bool


class SummaryReport(BaseModel):
    points: List[PointSummary] = Field(default_factory=list)
    failures: List[Failure] = Field(default_factory=list)
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def all_checks_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def find_run_directories(paths: Sequence[Union[str, Path]]) -> List[Path]:
    """Every directory at or below the given paths that holds a manifest"""
    found: List[Path] = []
    for path in paths:
        path = Path(path)
        if (path / MANIFEST_FILE).is_file():
            found.append(path)
        elif path.is_dir():
            found.extend(sorted(p.parent for p in path.rglob(MANIFEST_FILE)))
    return found


def _median_iqr(values: List[Optional[float]], none_as_inf: bool) -> tuple:
    if none_as_inf:
        data = [np.inf if v is None else float(v) for v in values]
    else:
        data = [float(v) for v in values if v is not None]
    if not data:
        return None, None
    median = float(np.median(data))
    q1, q3 = np.percentile(data, [25, 75])
    iqr = float(q3 - q1)
    if not np.isfinite(median):
        median = None
    if not np.isfinite(iqr):
        iqr = None
    return median, iqr


def _compare(observed: float, op: str, value: float) -> bool:
    return {
        "<": observed < value,
        "<=": observed <= value,
        ">": observed > value,
        ">=": observed >= value,
        "==": observed == value,
    }[op]


def _speedup(base_rounds: Optional[float], rounds: Optional[float]) -> Optional[float]:
    """Baseline median rounds over the point's; None rounds (never reached) count as infinite"""
    if rounds is None:
        return None if base_rounds is None else 0.0
    if base_rounds is None:
        return float("inf")
    if rounds == 0:
        # both at the threshold from the start count as even
        return 1.0 if base_rounds == 0 else float("inf")
    return base_rounds / rounds


def summarize_runs(paths: Sequence[Union[str, Path]]) -> SummaryReport:
    """Seed medians, IQRs, speedups and preset checks over run directories"""
    directories = find_run_directories(paths)
    if not directories:
        raise MissingArtifactError(f"no run directories found under {', '.join(map(str, paths))}")

    report = SummaryReport()
    grouped: Dict[tuple, List[RunSummary]] = {}
    configs: Dict[str, Dict[str, Any]] = {}
    for directory in directories:
        try:
            spec = load_manifest(directory)
            if not (directory / METRICS_FILE).is_file():
                raise MissingArtifactError(f"missing metrics file {directory / METRICS_FILE}")
            summary = read_summary(directory)
        except MissingArtifactError as e:
            report.failures.append(Failure(path=str(directory), reason=str(e)))
            continue
        if summary.status != "ok":
            report.failures.append(Failure(path=str(directory), reason=summary.message or summary.status))
            continue
        grouped.setdefault((summary.preset, summary.point), []).append(summary)
        configs.setdefault(summary.preset, spec.config)

    for (preset, point), runs in sorted(grouped.items()):
        point_summary = PointSummary(preset=preset, point=point, seeds=len(runs))
        for metric in SUMMARY_METRICS:
            values = [getattr(r, metric) for r in runs]
            median, iqr = _median_iqr(values, none_as_inf=metric == "rounds_to_threshold")
            point_summary.median[metric] = median
            point_summary.iqr[metric] = iqr
        report.points.append(point_summary)

    by_key = {(p.preset, p.point): p for p in report.points}
    for preset, config in configs.items():
        baseline = config.get("baseline_point")
        base = by_key.get((preset, baseline)) if baseline else None
        if base is not None:
            base_rounds = base.median.get("rounds_to_threshold")
            for p in report.points:
                if p.preset == preset:
                    p.speedup = _speedup(base_rounds, p.median.get("rounds_to_threshold"))

        for check in config.get("checks", []):
            target = by_key.get((preset, check["point"]))
            if target is None:
                observed = None
            elif check["metric"] == "speedup":
                observed = target.speedup
            else:
                observed = target.median.get(check["metric"])
            passed = observed is not None and _compare(observed, check["op"], check["value"])
            report.checks.append(
                CheckResult(
                    preset=preset,
                    point=check["point"],
                    metric=check["metric"],
                    op=check["op"],
                    value=check["value"],
                    observed=observed,
                    passed=passed,
                )
            )
    logger.info(
        f"summarized {sum(p.seeds for p in report.points)} runs in {len(report.points)} points, "
        f"{len(report.failures)} failures"
    )
    return report


def summary_rows(report: SummaryReport) -> List[Dict[str, Any]]:
    rows = []
    for p in report.points:
        row: Dict[str, Any] = {"preset": p.preset, "point": p.point, "seeds": p.seeds, "speedup": p.speedup}
        for metric in SUMMARY_METRICS:
            row[f"{metric}_median"] = p.median.get(metric)
            row[f"{metric}_iqr"] = p.iqr.get(metric)
        rows.append(row)
    return rows


def summary_columns() -> List[str]:
    columns = ["preset", "point", "seeds", "speedup"]
    for metric in SUMMARY_METRICS:
        columns += [f"{metric}_median", f"{metric}_iqr"]
    return columns
