"""
Config - experiment presets, dotted overrides and config validation
Versie: 1.0

A preset is one human-editable TOML file: the task, the policy/reference
initialization, the trainer settings, sweep axes and the seed list. Every sweep
point is resolved into a complete, explicit configuration before it runs, so
the manifest of a run determines it fully.
"""

import copy
import hashlib
import itertools
import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigurationError
from oracles import tilted_reference
from policy_engine import LogitPolicy, TabularPolicy, TinyNetPolicy
from token_mdp import PromptSpec, RewardRule, TokenMdp
from trainer import TrainerConfig, difficulty_bias, difficulty_mdp

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"
OUTPUT_ROOT_ENV = "REVAL_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


# ============================================
# CONFIG MODELS
# ============================================


class TaskConfig(BaseModel):
    """Either a difficulty-matched one-shot task or an explicit token MDP"""

    model_config = ConfigDict(extra="forbid")

    difficulty: Optional[Literal["hard", "medium", "easy"]] = Field(
        default=None, description="Calibrated one-shot task; other fields are ignored"
    )
    name: str = Field(default="task", description="Task name")
    vocab_size: Optional[int] = Field(default=None, description="|V|")
    horizon: Optional[int] = Field(default=None, description="H")
    prompts: List[PromptSpec] = Field(default_factory=list, description="Prompt set")
    reward_rule: Optional[RewardRule] = Field(default=None, description="Verifier")
    eos_token: Optional[int] = Field(default=None, description="EOS id or none")
    pad_token: Optional[int] = Field(default=None, description="Pad id (default vocab_size)")

    @model_validator(mode="before")
    @classmethod
    def _coerce_prompts(cls, data):
        if isinstance(data, dict) and isinstance(data.get("prompts"), list):
            data = {
                **data,
                "prompts": [
                    {"tokens": p} if isinstance(p, (list, tuple)) else p for p in data["prompts"]
                ],
            }
        return data

    @model_validator(mode="after")
    def _complete(self) -> "TaskConfig":
        if self.difficulty is None:
            missing = [
                field
                for field in ("vocab_size", "horizon", "reward_rule")
                if getattr(self, field) is None
            ]
            if not self.prompts:
                missing.append("prompts")
            if missing:
                raise ValueError(f"task needs {', '.join(missing)} (or a difficulty level)")
        return self

    def build(self) -> TokenMdp:
        if self.difficulty is not None:
            return difficulty_mdp(self.difficulty)
        return TokenMdp(
            name=self.name,
            vocab_size=self.vocab_size,
            horizon=self.horizon,
            prompts=self.prompts,
            reward_rule=self.reward_rule,
            eos_token=self.eos_token,
            pad_token=self.pad_token,
        )


class PolicyConfig(BaseModel):
    """Parameterization and reference initialization (training starts at the reference)"""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["tabular", "tinynet"] = Field(default="tabular", description="Parameterization")
    init: Literal["zeros", "random", "calibrated"] = Field(
        default="zeros", description="Reference logits: uniform, random normal or difficulty-tilted"
    )
    scale: float = Field(default=1.0, ge=0.0, description="Std of random initial parameters")
    seed: int = Field(default=0, ge=0, description="Seed of the random initialization")
    hidden: int = Field(default=16, ge=1, description="TinyNet hidden units")
    window: int = Field(default=4, ge=1, description="TinyNet token window")

    def build(self, mdp: TokenMdp, task: TaskConfig) -> LogitPolicy:
        if self.init == "calibrated":
            if self.kind != "tabular" or task.difficulty is None:
                raise ConfigurationError("calibrated init needs a tabular policy on a difficulty task")
            return tilted_reference(mdp, difficulty_bias(task.difficulty), seed=self.seed)
        scale = self.scale if self.init == "random" else 0.0
        if self.kind == "tinynet":
            return TinyNetPolicy.initialize(
                mdp, hidden=self.hidden, window=self.window, scale=scale, seed=self.seed
            )
        return TabularPolicy.for_mdp(mdp, scale=scale, seed=self.seed)


class SweepPoint(BaseModel):
    """Explicit sweep point: a label and the dotted overrides it applies"""

    model_config = ConfigDict(extra="forbid")

    label: str = Field(description="Directory name of the point")
    set: Dict[str, Any] = Field(default_factory=dict, description="dotted.path -> value")


class Check(BaseModel):
    """Summary assertion on the seed median of a run metric (or the point speedup)"""

    model_config = ConfigDict(extra="forbid")

    point: str = Field(description="Sweep point label")
    metric: str = Field(description="Key of summary.json, or speedup against the baseline point")
    op: Literal["<", "<=", ">", ">=", "=="] = Field(description="Comparison")
    value: float = Field(description="Right-hand side")


class ExperimentPreset(BaseModel):
    """One preset file"""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(description="Preset name")
    description: str = Field(default="", description="What the preset reproduces")
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1, description="Seed list")
    task: TaskConfig = Field(description="Task definition")
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    sweep: Dict[str, List[Any]] = Field(
        default_factory=dict, description="Cartesian sweep axes, dotted.path -> values"
    )
    points: List[SweepPoint] = Field(default_factory=list, description="Explicit sweep points")
    checks: List[Check] = Field(default_factory=list, description="Summary assertions")
    baseline_point: Optional[str] = Field(
        default=None, description="Point whose rounds-to-threshold anchors speedup ratios"
    )
    save_buffer: bool = Field(default=False, description="Dump the final buffer per run")
    output_dir: Optional[str] = Field(default=None, description="Override of the output root")


class RunSpec(BaseModel):
    """One fully resolved (point, seed) run"""

    preset: str
    point: str
    seed: int
    config: Dict[str, Any] = Field(description="Resolved preset dict with this point applied")

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def preset_model(self) -> ExperimentPreset:
        return ExperimentPreset.model_validate(self.config)


# ============================================
# LOADING AND OVERRIDES
# ============================================


def output_root() -> Path:
    return Path(os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def resolve_preset_path(name_or_path: Union[str, Path]) -> Path:
    path = Path(name_or_path)
    if path.is_file():
        return path
    candidate = PRESET_DIR / f"{name_or_path}.toml"
    if candidate.is_file():
        return candidate
    raise ConfigurationError(
        f"unknown preset '{name_or_path}'; available: {', '.join(list_presets())}"
    )


def load_raw(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a TOML file into a plain dict"""
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}") from e


def parse_override(text: str) -> Tuple[str, Any]:
    """'a.b.c=value' -> ('a.b.c', value); value is a JSON literal or a plain string"""
    if "=" not in text:
        raise ConfigurationError(f"malformed override '{text}', expected dotted.path=value")
    path, raw = text.split("=", 1)
    path = path.strip()
    if not path or any(not part for part in path.split(".")):
        raise ConfigurationError(f"malformed override path in '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def set_dotted(data: Dict[str, Any], path: str, value: Any) -> None:
    node = data
    parts = path.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"override '{path}' descends into a non-table value at '{part}'")
        node = child
    node[parts[-1]] = value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[Union[str, Tuple[str, Any]]]) -> Dict[str, Any]:
    result = copy.deepcopy(data)
    for item in overrides:
        path, value = parse_override(item) if isinstance(item, str) else item
        set_dotted(result, path, value)
    return result


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def sweep_points(preset: ExperimentPreset) -> List[SweepPoint]:
    """Explicit points, else the Cartesian product of the axes, else one 'default' point"""
    if preset.points:
        return list(preset.points)
    if not preset.sweep:
        return [SweepPoint(label="default")]
    axes = list(preset.sweep.items())
    points = []
    for combo in itertools.product(*(values for _, values in axes)):
        assignments = {path: value for (path, _), value in zip(axes, combo)}
        label = "_".join(
            f"{path.split('.')[-1]}={_format_value(value)}" for path, value in assignments.items()
        )
        points.append(SweepPoint(label=label, set=assignments))
    return points


def load_preset(
    name_or_path: Union[str, Path], overrides: Sequence[str] = ()
) -> Tuple[ExperimentPreset, Dict[str, Any]]:
    """Preset model plus the raw dict it came from (overrides applied)"""
    path = resolve_preset_path(name_or_path)
    raw = apply_overrides(load_raw(path), overrides)
    try:
        preset = ExperimentPreset.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid preset {path}:\n{e}") from e
    logger.debug(f"loaded preset '{preset.name}' from {path}")
    return preset, raw


def resolve_runs(preset: ExperimentPreset, seeds: Optional[Sequence[int]] = None) -> List[RunSpec]:
    """One RunSpec per (sweep point, seed), every default written out"""
    base = preset.model_dump(mode="json")
    base.pop("sweep", None)
    base.pop("points", None)
    runs = []
    for point in sweep_points(preset):
        resolved = apply_overrides(base, list(point.set.items()))
        try:
            point_preset = ExperimentPreset.model_validate(resolved)
        except ValidationError as e:
            raise ConfigurationError(f"sweep point '{point.label}' is invalid:\n{e}") from e
        for seed in seeds if seeds is not None else preset.seeds:
            config = point_preset.model_dump(mode="json")
            config["trainer"]["seed"] = int(seed)
            config["seeds"] = [int(seed)]
            runs.append(RunSpec(preset=preset.name, point=point.label, seed=int(seed), config=config))
    return runs


# ============================================
# VALIDATION
# ============================================


class Diagnostic(BaseModel):
    """One problem found in a config file"""

    field: str = Field(description="Dotted location of the problem")
    message: str = Field(description="What is wrong")
    line: Optional[int] = Field(default=None, description="1-based line in the file, when known")

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.field}: {self.message}"


_DOTTED_NAME = re.compile(r"\b([a-z_]+(?:\.[a-z_]+)+)\b")


def _find_line(lines: List[str], key: str) -> Optional[int]:
    pattern = re.compile(rf'^\s*"?{re.escape(key)}"?\s*=')
    for number, line in enumerate(lines, start=1):
        if pattern.match(line):
            return number
    return None


def _diagnostics_from(error: ValidationError, lines: List[str], prefix: str = "") -> List[Diagnostic]:
    found = []
    for item in error.errors():
        loc = [str(part) for part in item["loc"] if not isinstance(part, int)]
        field = ".".join(loc) or "<root>"
        message = item["msg"]
        key = loc[-1] if loc else None
        # model-level validators name the offending field inside the message
        named = _DOTTED_NAME.search(message)
        if named:
            field = ".".join(loc + [named.group(1)]) if loc else named.group(1)
            key = named.group(1).split(".")[-1]
        found.append(
            Diagnostic(
                field=f"{prefix}{field}",
                message=message,
                line=_find_line(lines, key) if key else None,
            )
        )
    return found


def validate_config(path: Union[str, Path]) -> List[Diagnostic]:
    """Schema and invariant checks; an empty list means the file is valid"""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"cannot read config file {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        return [Diagnostic(field="<toml>", message=str(e), line=getattr(e, "lineno", None))]

    try:
        preset = ExperimentPreset.model_validate(raw)
    except ValidationError as e:
        return _diagnostics_from(e, lines)

    diagnostics: List[Diagnostic] = []
    base = preset.model_dump(mode="json")
    base.pop("sweep", None)
    base.pop("points", None)
    for point in sweep_points(preset):
        try:
            ExperimentPreset.model_validate(apply_overrides(base, list(point.set.items())))
        except ValidationError as e:
            diagnostics.extend(_diagnostics_from(e, lines, prefix=f"[{point.label}] "))
        except ConfigurationError as e:
            diagnostics.append(Diagnostic(field=f"[{point.label}]", message=str(e)))

    labels = {p.label for p in sweep_points(preset)}
    for check in preset.checks:
        if check.point not in labels:
            diagnostics.append(
                Diagnostic(
                    field="checks.point",
                    message=f"unknown sweep point '{check.point}'",
                    line=_find_line(lines, "point"),
                )
            )
    if preset.baseline_point is not None and preset.baseline_point not in labels:
        diagnostics.append(
            Diagnostic(
                field="baseline_point",
                message=f"unknown sweep point '{preset.baseline_point}'",
                line=_find_line(lines, "baseline_point"),
            )
        )
    return diagnostics
