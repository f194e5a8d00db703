"""
Harness CLI - run presets, validate configs, summarize and cost runs
Versie: 1.0

    reval-lab run reuse_sweep --seed 0 --override trainer.iterations=50
    reval-lab run runs/reuse_sweep/reval_step2/seed_0/manifest.json
    reval-lab validate presets/beta_sweep.toml
    reval-lab summarize runs/reuse_sweep
    reval-lab oracle-check --instances 20
    reval-lab cost-report runs/reuse_sweep --t-gen 36.8 --t-up 2.8 --baseline grpo

Exit codes: 0 success, 1 configuration or missing-artifact error (or a failed
check), 2 numeric abort.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

import numpy as np
import torch
import typer
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from artifacts import (
    CURVE_COLUMNS,
    MANIFEST_FILE,
    METRICS_FILE,
    MetricsWriter,
    RunSummary,
    aggregate_columns,
    aggregate_rows,
    curve_rows,
    load_manifest,
    read_metrics,
    run_directory,
    summarize_runs,
    summary_columns,
    summary_rows,
    write_csv,
    write_manifest,
    write_summary,
)
from config import (
    ExperimentPreset,
    RunSpec,
    apply_overrides,
    list_presets,
    load_preset,
    output_root,
    resolve_preset_path,
    resolve_runs,
    validate_config,
)
from cost_model import breakeven_reuse, cost_report, max_profitable_reuse
from errors import ConfigurationError, NumericAbortError, RevalError, exit_code_for
from objectives import ObjectiveConfig, evaluate_objective, objective_fn, reval_loss, tbrm_loss
from oracles import random_potential, random_tiny_task, reval_fixed_point, shaping_invariance_check
from policy_engine import ReferenceSnapshot, TabularPolicy, batch_trajectory_terms, finite_diff_check
from replay import expected_reuse
from token_mdp import rollout_batch, spawn_seeds
from trainer import TrainResult, TrainerConfig, train

load_dotenv()

logger = logging.getLogger(__name__)
console = Console()

app = typer.Typer(
    name="reval-lab",
    help="Off-policy value-based RL on tiny token MDPs: presets, sweeps and summaries.",
    no_args_is_help=True,
)


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def code_version() -> str:
    try:
        return version("reval-lab")
    except PackageNotFoundError:
        return "unknown"


# ============================================
# RUNNING PRESETS
# ============================================


def _expected_reuse_for(cfg: TrainerConfig) -> Optional[float]:
    """Analytic uses per trajectory for the configured update pattern"""
    if cfg.objective.kind == "grpo":
        return float(cfg.updates_per_generation)
    k = cfg.updates_per_generation
    if cfg.buffer.update_pattern == "onpolicy_then_buffer":
        if k == 1:
            return 1.0
        return 1.0 + expected_reuse(cfg.buffer.capacity, cfg.update_batch_size, k - 1)
    return expected_reuse(cfg.buffer.capacity, cfg.update_batch_size, k)


def _run_summary(spec: RunSpec, preset: ExperimentPreset, result: Optional[TrainResult]) -> RunSummary:
    cfg = preset.trainer
    summary = RunSummary(
        preset=spec.preset,
        point=spec.point,
        seed=spec.seed,
        method=cfg.objective.kind,
        step=cfg.updates_per_generation,
        beta=cfg.objective.beta,
        reset_period=cfg.reset_period,
        reward_transform=cfg.objective.reward_transform,
        threshold=cfg.eval.threshold,
        expected_reuse=_expected_reuse_for(cfg),
        config_hash=spec.config_hash,
    )
    if result is None:
        return summary
    kls = [m.kl_to_ref for m in result.metrics if m.kl_to_ref is not None]
    kls += [m.kl_before_reset for m in result.metrics if m.kl_before_reset is not None]
    losses = [m.loss for m in result.metrics if m.loss is not None]
    summary.generation_count = result.generation_count
    summary.update_count = result.update_count
    summary.initial_avg = result.initial_avg
    summary.final_avg = result.eval_curve[-1][1] if result.eval_curve else None
    summary.rounds_to_threshold = result.rounds_to_threshold
    summary.final_loss = losses[-1] if losses else None
    summary.final_kl_sampled = result.final_kl_sampled
    summary.final_kl_exact = result.final_kl_exact
    summary.max_kl_sampled = max(kls) if kls else None
    summary.mean_reuse = result.mean_reuse
    return summary


def execute_run(spec_data: Dict[str, Any], root: str) -> Dict[str, Any]:
    """Train one (point, seed) and write its directory; returns the summary dict.

    Module-level so sweep points can run in worker processes.
    """
    spec = RunSpec.model_validate(spec_data)
    preset = spec.preset_model()
    directory = run_directory(root, spec.preset, spec.point, spec.seed)
    write_manifest(directory, spec, code_version())

    mdp = preset.task.build()
    init_policy = preset.policy.build(mdp, preset.task)
    checkpoints = directory / "checkpoints" if preset.trainer.checkpoint_every else None

    with MetricsWriter(directory / METRICS_FILE) as sink:
        try:
            result = train(preset.trainer, mdp, init_policy, sink=sink, checkpoint_dir=checkpoints)
        except NumericAbortError as error:
            summary = _run_summary(spec, preset, None)
            summary.status = "aborted"
            summary.message = str(error)
            summary.update_count = max(sink.count - 1, 0)
            write_summary(directory, summary)
            return summary.model_dump(mode="json")

    if preset.save_buffer and result.buffer is not None and len(result.buffer):
        result.buffer.dump_trajectories(directory / "buffer.jsonl")
    summary = _run_summary(spec, preset, result)
    write_summary(directory, summary)
    logger.info(
        f"{spec.preset}/{spec.point}/seed_{spec.seed}: rounds={summary.rounds_to_threshold} "
        f"avg={summary.final_avg} kl={summary.final_kl_sampled}"
    )
    return summary.model_dump(mode="json")


class PresetRun(BaseModel):
    """Outcome of run_preset"""

    directory: Path = Field(description="<root>/<preset>")
    summaries: List[RunSummary] = Field(default_factory=list)

    @property
    def aborted(self) -> List[RunSummary]:
        return [s for s in self.summaries if s.status != "ok"]

    @property
    def exit_code(self) -> int:
        return NumericAbortError.exit_code if self.aborted else 0


def _runs_from_manifest(
    path: Path, overrides: Sequence[str], seeds: Optional[Sequence[int]]
) -> List[RunSpec]:
    spec = load_manifest(path)
    config = apply_overrides(spec.config, overrides)
    try:
        preset = ExperimentPreset.model_validate(config)
    except ValidationError as e:
        raise ConfigurationError(f"invalid manifest {path}:\n{e}") from e
    runs = []
    for seed in seeds if seeds is not None else [spec.seed]:
        resolved = preset.model_dump(mode="json")
        resolved["trainer"]["seed"] = int(seed)
        resolved["seeds"] = [int(seed)]
        runs.append(RunSpec(preset=spec.preset, point=spec.point, seed=int(seed), config=resolved))
    return runs


def run_preset(
    name_or_path: str,
    overrides: Sequence[str] = (),
    seeds: Optional[Sequence[int]] = None,
    output_dir: Optional[Path] = None,
    workers: int = 1,
) -> PresetRun:
    """Run every (point, seed) of a preset, or replay a manifest.json"""
    path = Path(name_or_path)
    if path.name == MANIFEST_FILE or (path.is_dir() and (path / MANIFEST_FILE).is_file()):
        runs = _runs_from_manifest(path, overrides, seeds)
        preset_output = None
    else:
        preset, _ = load_preset(name_or_path, overrides)
        runs = resolve_runs(preset, seeds)
        preset_output = preset.output_dir
    root = Path(output_dir or preset_output or output_root())
    logger.info(f"running {len(runs)} runs of '{runs[0].preset}' into {root}")

    payloads = [r.model_dump(mode="json") for r in runs]
    if workers > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(execute_run, payloads, [str(root)] * len(payloads)))
    else:
        results = [execute_run(p, str(root)) for p in payloads]
    summaries = [RunSummary.model_validate(r) for r in results]

    directory = root / runs[0].preset
    threshold = summaries[0].threshold
    write_csv(directory / "aggregate.csv", aggregate_rows(summaries), aggregate_columns(threshold))
    curves = []
    for spec in runs:
        records = read_metrics(run_directory(root, spec.preset, spec.point, spec.seed) / METRICS_FILE)
        curves.extend(curve_rows(spec.point, spec.seed, records))
    write_csv(directory / "curves.csv", curves, CURVE_COLUMNS)

    outcome = PresetRun(directory=directory, summaries=summaries)
    for s in outcome.aborted:
        logger.error(f"{s.point}/seed_{s.seed} aborted: {s.message}")
    return outcome


# ============================================
# ORACLE CHECKS
# ============================================


class OracleCheck(BaseModel):
    """One property check on one random tiny task"""

    instance: int
    check: str
    value: float
    tolerance: float
    passed: bool


def run_oracle_checks(instances: int = 20, seed: int = 0, beta: float = 0.1) -> List[OracleCheck]:
    """Fixed-point, shaping-invariance and gradient checks on random tiny tasks"""
    results: List[OracleCheck] = []
    cfg = ObjectiveConfig(kind="reval", beta=beta)
    for i, task_seed in enumerate(spawn_seeds(seed, instances)):
        mdp = random_tiny_task(task_seed)
        ref = ReferenceSnapshot.take(TabularPolicy.for_mdp(mdp, scale=1.0, seed=task_seed))
        prompts = [p for p in mdp.prompt_states for _ in range(4)]

        fixed = reval_fixed_point(mdp, ref, beta)
        batch = rollout_batch(mdp, fixed, prompts, spawn_seeds(task_seed + 1, len(prompts)))
        loss = reval_loss(fixed, ref, batch, cfg).loss
        results.append(
            OracleCheck(
                instance=i,
                check="reval_fixed_point_loss",
                value=loss,
                tolerance=1e-12,
                passed=loss <= 1e-12,
            )
        )
        # at the shaped optimum every unshaped error equals V_ref(s1)
        _, v_ref = batch_trajectory_terms(ref.policy, batch)
        offset = abs(tbrm_loss(fixed, ref, batch, cfg).loss - float(torch.mean(v_ref**2)))
        results.append(
            OracleCheck(
                instance=i,
                check="tbrm_offset_at_reval_optimum",
                value=offset,
                tolerance=1e-10,
                passed=offset <= 1e-10,
            )
        )

        shaping = shaping_invariance_check(mdp, ref, beta, potential=random_potential(task_seed))
        results.append(
            OracleCheck(
                instance=i,
                check="shaping_invariance",
                value=shaping.max_abs_diff,
                tolerance=1e-8,
                passed=shaping.passed,
            )
        )

        policy = TabularPolicy.for_mdp(mdp, scale=1.0, seed=task_seed + 2)
        behaviour = rollout_batch(mdp, policy, prompts, spawn_seeds(task_seed + 3, len(prompts)))
        report = finite_diff_check(
            policy,
            objective_fn(policy, ref, behaviour, cfg),
            gradient=evaluate_objective(policy, ref, behaviour, cfg).gradient.values,
        )
        results.append(
            OracleCheck(
                instance=i,
                check="reval_gradient",
                value=report.max_relative_error,
                tolerance=1e-4,
                passed=report.passed,
            )
        )
    return results


# ============================================
# COMMANDS
# ============================================


def _fail(error: RevalError) -> NoReturn:
    logger.error(str(error))
    raise typer.Exit(code=exit_code_for(error))


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return f"{value:.4g}"


@app.command()
def run(
    preset: str = typer.Argument(..., help="Preset name, preset file or manifest.json"),
    seed: Optional[List[int]] = typer.Option(None, "--seed", "-s", help="Seed(s) replacing the preset list"),
    output_dir: Optional[Path] = typer.Option(None, "--output-dir", "-o", help="Output root"),
    override: Optional[List[str]] = typer.Option(None, "--override", help="dotted.path=value, repeatable"),
    workers: int = typer.Option(1, "--workers", "-w", min=1, help="Parallel run processes"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """Run every sweep point and seed of a preset."""
    setup_logging(verbose)
    try:
        outcome = run_preset(preset, override or [], seed or None, output_dir, workers)
    except RevalError as e:
        _fail(e)

    table = Table(title=f"{outcome.directory.name}")
    for column in ("point", "seed", "status", "rounds", "final avg", "KL", "gens", "updates"):
        table.add_column(column)
    for s in outcome.summaries:
        table.add_row(
            s.point,
            str(s.seed),
            s.status,
            "-" if s.rounds_to_threshold is None else str(s.rounds_to_threshold),
            _fmt(s.final_avg),
            _fmt(s.final_kl_sampled),
            str(s.generation_count),
            str(s.update_count),
        )
    console.print(table)
    console.print(f"results in {outcome.directory}")
    raise typer.Exit(code=outcome.exit_code)


@app.command()
def validate(config_file: Path = typer.Argument(..., help="Preset TOML file")):
    """Check a preset file against the schema and invariants."""
    setup_logging()
    try:
        diagnostics = validate_config(config_file)
    except RevalError as e:
        _fail(e)
    if not diagnostics:
        console.print(f"[green]{config_file} is valid[/green]")
        return
    for d in diagnostics:
        console.print(f"[red]{config_file}:{d}[/red]")
    raise typer.Exit(code=1)


@app.command()
def summarize(
    paths: List[Path] = typer.Argument(..., help="Run directories or preset output directories"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Write the point table as CSV"),
):
    """Seed medians, IQRs, speedups, failures and preset checks."""
    setup_logging()
    try:
        report = summarize_runs(paths)
    except RevalError as e:
        _fail(e)

    table = Table(title="summary")
    for column in ("preset", "point", "seeds", "rounds (median)", "IQR", "speedup", "final avg", "final KL"):
        table.add_column(column)
    for p in report.points:
        table.add_row(
            p.preset,
            p.point,
            str(p.seeds),
            _fmt(p.median.get("rounds_to_threshold")),
            _fmt(p.iqr.get("rounds_to_threshold")),
            _fmt(p.speedup),
            _fmt(p.median.get("final_avg")),
            _fmt(p.median.get("final_kl_sampled")),
        )
    console.print(table)

    if report.failures:
        console.print("[bold red]failures[/bold red]")
        for f in report.failures:
            console.print(f"  {f.path}: {f.reason}")
    for c in report.checks:
        mark = "[green]PASS[/green]" if c.passed else "[red]FAIL[/red]"
        console.print(f"{mark} {c.preset}/{c.point}: {c.metric} {c.op} {c.value} (observed {_fmt(c.observed)})")
    if output is not None:
        write_csv(output, summary_rows(report), summary_columns())
        console.print(f"written {output}")
    if not report.all_checks_passed:
        raise typer.Exit(code=1)


@app.command("oracle-check")
def oracle_check(
    instances: int = typer.Option(20, "--instances", "-n", min=1, help="Random tiny tasks"),
    seed: int = typer.Option(0, "--seed", "-s", help="Root seed"),
    beta: float = typer.Option(0.1, "--beta", help="Regularization strength"),
):
    """Exact property checks against the soft value-iteration oracle."""
    setup_logging()
    try:
        results = run_oracle_checks(instances, seed, beta)
    except RevalError as e:
        _fail(e)
    table = Table(title=f"oracle checks ({instances} instances)")
    for column in ("check", "passed", "worst value", "tolerance"):
        table.add_column(column)
    for name in dict.fromkeys(r.check for r in results):
        rows = [r for r in results if r.check == name]
        passed = sum(r.passed for r in rows)
        table.add_row(name, f"{passed}/{len(rows)}", _fmt(max(r.value for r in rows)), _fmt(rows[0].tolerance))
    console.print(table)
    if not all(r.passed for r in results):
        raise typer.Exit(code=1)


@app.command("cost-report")
def cost_report_command(
    paths: List[Path] = typer.Argument(..., help="Run directories to cost"),
    t_gen: float = typer.Option(36.8, "--t-gen", help="Seconds per generation round"),
    t_up: float = typer.Option(2.8, "--t-up", help="Seconds per update"),
    baseline: Optional[str] = typer.Option(None, "--baseline", help="Baseline point label"),
    gen_ratio: Optional[float] = typer.Option(None, "--gen-ratio", help="Also report breakeven K"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Write the rows as CSV"),
):
    """Project wall-clock time from measured generation and update counts."""
    setup_logging()
    try:
        report = summarize_runs(paths)
        runs = [
            {
                "label": p.point,
                "generation_count": int(np.ceil(p.median["generation_count"] or 0)),
                "update_count": int(np.ceil(p.median["update_count"] or 0)),
            }
            for p in report.points
        ]
        rows = cost_report(runs, t_gen, t_up, baseline_label=baseline)
        breakeven = max_k = None
        if gen_ratio is not None:
            breakeven = breakeven_reuse(t_gen, t_up, gen_ratio)
            max_k = max_profitable_reuse(t_gen, t_up, gen_ratio)
    except RevalError as e:
        _fail(e)

    table = Table(title="projected training time (lower bound)")
    for column in ("label", "generations", "updates", "hours", "speedup", "saved (s)"):
        table.add_column(column)
    for r in rows:
        table.add_row(
            r.label,
            str(r.k_generation),
            str(r.k_update),
            f"{r.projected_hours:.2f}",
            _fmt(r.speedup_vs_baseline),
            _fmt(r.savings_vs_baseline),
        )
    console.print(table)
    if gen_ratio is not None:
        console.print(f"breakeven K: {breakeven}, largest profitable K: {max_k}")
    if output is not None:
        write_csv(output, [r.model_dump() for r in rows], list(rows[0].model_dump()) if rows else ["label"])


@app.command("list-presets")
def list_presets_command():
    """Show the bundled presets."""
    table = Table(title="presets")
    table.add_column("name")
    table.add_column("description")
    for name in list_presets():
        try:
            preset, _ = load_preset(resolve_preset_path(name))
            description = preset.description
        except RevalError as e:
            description = f"[red]{e}[/red]"
        table.add_row(name, description)
    console.print(table)


if __name__ == "__main__":
    app()
