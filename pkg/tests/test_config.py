"""
Tests for preset loading, dotted overrides, sweep resolution and config validation
"""

import pytest
from pydantic import ValidationError

import config as config_module
from config import (
    PRESET_DIR,
    ExperimentPreset,
    PolicyConfig,
    TaskConfig,
    apply_overrides,
    list_presets,
    load_preset,
    parse_override,
    resolve_runs,
    set_dotted,
    sweep_points,
    validate_config,
)
from errors import ConfigurationError
from policy_engine import TinyNetPolicy
from token_mdp import PrefixCount

VALID_PRESET = """
name = "small"
seeds = [0, 1]

[task]
vocab_size = 3
horizon = 2
prompts = [[0], [1]]
reward_rule = { kind = "prefix_count", target_token = 1, threshold = 1 }

[trainer]
iterations = 3
rollouts_per_prompt = 4

[trainer.objective]
beta = 0.1

[trainer.buffer]
capacity = 8
"""


@pytest.fixture
def preset_file(tmp_path):
    """Write a preset text to a temporary TOML file"""

    def _write(text, name="preset.toml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


class TestOverrides:
    def test_json_values(self):
        assert parse_override("trainer.objective.beta=0.02") == ("trainer.objective.beta", 0.02)
        assert parse_override("trainer.eval.enabled=false") == ("trainer.eval.enabled", False)
        assert parse_override("seeds=[1, 2]") == ("seeds", [1, 2])

    def test_plain_string_value(self):
        assert parse_override("policy.init=random") == ("policy.init", "random")

    @pytest.mark.parametrize("text", ["trainer.iterations", "=3", "trainer..iterations=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigurationError):
            parse_override(text)

    def test_apply_does_not_mutate_input(self):
        data = {"trainer": {"iterations": 10}}
        result = apply_overrides(data, ["trainer.iterations=3", ("trainer.objective.kind", "tbrm")])
        assert data == {"trainer": {"iterations": 10}}
        assert result == {"trainer": {"iterations": 3, "objective": {"kind": "tbrm"}}}

    def test_cannot_descend_into_value(self):
        with pytest.raises(ConfigurationError):
            set_dotted({"trainer": 5}, "trainer.iterations", 3)


class TestModels:
    def test_task_needs_fields_or_difficulty(self):
        with pytest.raises(ValidationError):
            TaskConfig(vocab_size=3)
        assert TaskConfig(difficulty="easy").build().name == "one_shot_easy"

    def test_task_prompts_from_lists(self):
        task = TaskConfig(
            vocab_size=3,
            horizon=2,
            prompts=[[0], [1, 2]],
            reward_rule={"kind": "prefix_count", "target_token": 1, "threshold": 1},
        )
        mdp = task.build()
        assert [p.tokens for p in mdp.prompts] == [(0,), (1, 2)]
        assert isinstance(mdp.reward_rule, PrefixCount)

    def test_calibrated_init_needs_difficulty(self):
        task = TaskConfig(
            vocab_size=3, horizon=1, prompts=[[0]], reward_rule={"kind": "exact_match", "target": [1]}
        )
        with pytest.raises(ConfigurationError):
            PolicyConfig(init="calibrated").build(task.build(), task)

    def test_tinynet_policy(self):
        task = TaskConfig(difficulty="hard")
        policy = PolicyConfig(kind="tinynet", init="random", hidden=4, window=2).build(task.build(), task)
        assert isinstance(policy, TinyNetPolicy)

    def test_output_root_from_environment(self, output_root):
        assert config_module.output_root() == output_root


class TestSweeps:
    def test_cartesian_labels(self):
        preset, _ = load_preset("difficulty")
        labels = [p.label for p in sweep_points(preset)]
        assert len(labels) == 6
        assert labels[0] == "difficulty=hard_kind=reval"
        assert labels[-1] == "difficulty=easy_kind=grpo"

    def test_float_labels(self):
        preset, _ = load_preset("beta_sweep")
        assert [p.label for p in sweep_points(preset)] == ["beta=0.2", "beta=0.02", "beta=0.002"]

    def test_default_point(self, preset_file):
        preset, _ = load_preset(preset_file(VALID_PRESET))
        assert [p.label for p in sweep_points(preset)] == ["default"]

    def test_resolve_runs(self):
        preset, _ = load_preset("calibration")
        runs = resolve_runs(preset)
        assert [(r.point, r.seed) for r in runs] == [
            ("reval", 0),
            ("reval", 1),
            ("reval", 2),
            ("tbrm", 0),
            ("tbrm", 1),
            ("tbrm", 2),
        ]
        tbrm = runs[4]
        assert tbrm.config["trainer"]["objective"]["kind"] == "tbrm"
        assert tbrm.config["trainer"]["seed"] == 1
        assert tbrm.config["seeds"] == [1]
        assert tbrm.config["points"] == []

    def test_seed_override(self):
        preset, _ = load_preset("calibration")
        assert [r.seed for r in resolve_runs(preset, seeds=[7])] == [7, 7]

    def test_config_hash(self):
        preset, _ = load_preset("calibration")
        runs = resolve_runs(preset)
        again = resolve_runs(preset)
        assert runs[0].config_hash == again[0].config_hash
        assert len({r.config_hash for r in runs}) == len(runs)

    def test_resolved_config_round_trips(self):
        preset, _ = load_preset("reuse_sweep")
        run = resolve_runs(preset, seeds=[0])[-1]
        model = run.preset_model()
        assert isinstance(model, ExperimentPreset)
        assert model.trainer.updates_per_generation == 8
        assert model.trainer.buffer.capacity == 64

    def test_invalid_sweep_point(self, preset_file):
        text = VALID_PRESET + '\n[[points]]\nlabel = "bad"\nset = { "trainer.buffer.capacity" = 2 }\n'
        preset, _ = load_preset(preset_file(text))
        with pytest.raises(ConfigurationError):
            resolve_runs(preset)


class TestLoading:
    def test_bundled_presets(self):
        assert {"calibration", "reuse_sweep", "difficulty", "beta_sweep", "reset_sweep"} <= set(list_presets())

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            load_preset("no_such_preset")

    def test_invalid_override(self):
        with pytest.raises(ConfigurationError):
            load_preset("calibration", ["trainer.objective.beta=-1"])

    def test_override_applied(self):
        preset, raw = load_preset("calibration", ["trainer.iterations=2"])
        assert preset.trainer.iterations == 2
        assert raw["trainer"]["iterations"] == 2

    def test_broken_toml(self, preset_file):
        with pytest.raises(ConfigurationError):
            load_preset(preset_file("name = \n"))


class TestValidateConfig:
    @pytest.mark.parametrize("name", list_presets())
    def test_bundled_presets_are_valid(self, name):
        assert validate_config(PRESET_DIR / f"{name}.toml") == []

    def test_valid_file(self, preset_file):
        assert validate_config(preset_file(VALID_PRESET)) == []

    def test_capacity_below_batch_size(self, preset_file):
        text = VALID_PRESET.replace("capacity = 8", "capacity = 8\nbatch_size = 16")
        diagnostics = validate_config(preset_file(text))
        assert len(diagnostics) == 1
        assert diagnostics[0].field == "trainer.buffer.capacity"
        assert diagnostics[0].line == text.splitlines().index("capacity = 8") + 1

    def test_negative_beta(self, preset_file):
        text = VALID_PRESET.replace("beta = 0.1", "beta = -0.5")
        diagnostics = validate_config(preset_file(text))
        assert [d.field for d in diagnostics] == ["trainer.objective.beta"]
        assert diagnostics[0].line == text.splitlines().index("beta = -0.5") + 1
        assert "line" in str(diagnostics[0])

    def test_unknown_check_point(self, preset_file):
        text = VALID_PRESET + '\n[[checks]]\npoint = "nowhere"\nmetric = "final_avg"\nop = ">="\nvalue = 0.5\n'
        diagnostics = validate_config(preset_file(text))
        assert [d.field for d in diagnostics] == ["checks.point"]

    def test_unknown_baseline(self, preset_file):
        text = 'baseline_point = "nowhere"\n' + VALID_PRESET
        assert [d.field for d in validate_config(preset_file(text))] == ["baseline_point"]

    def test_toml_syntax_error(self, preset_file):
        diagnostics = validate_config(preset_file("name = [\n"))
        assert diagnostics[0].field == "<toml>"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            validate_config(tmp_path / "missing.toml")
