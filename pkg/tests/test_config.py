import json

import pytest

from cml_lab.config import ExperimentConfig
from cml_lab.errors import ConfigError, ParseError
from cml_lab.evaluation import canonical_json

from conftest import TINY_CONFIG


class TestFromDict:
    def test_defaults_validate(self):
        cfg = ExperimentConfig()
        cfg.validate()
        assert cfg.protocol == "cyclic"
        assert cfg.strategies == ("cml", "meta_noncurriculum", "replay", "vanilla")

    def test_full_document(self):
        cfg = ExperimentConfig.from_dict(TINY_CONFIG)
        assert cfg.seeds == (0, 1)
        assert cfg.synth.num_tasks == 2
        assert cfg.synth.groups[0].task_ids == (0, 1)
        assert cfg.synth.groups[0].overlap == 0.5
        assert cfg.train.hidden_dim == 8
        assert cfg.concept.relation_dim == 6

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_unknown_nested_key_has_path(self):
        with pytest.raises(ConfigError, match=r"train\.bogus"):
            ExperimentConfig.from_dict({"train": {"bogus": 1}})

    def test_unknown_group_key(self):
        doc = {"synth": {"groups": [{"task_ids": [0], "overlap": 0.1, "oops": 1}]}}
        with pytest.raises(ConfigError, match=r"groups\[0\]\.oops"):
            ExperimentConfig.from_dict(doc)

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"seeds": [1, 1]})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"strategies": ["sgd"]})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"protocol": "randomish"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"test_fraction": 1.5})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"workers": 0})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"train": {"epsilon": 2.0}})


class TestFromJson:
    def test_round_trip(self, tiny_config_path):
        cfg = ExperimentConfig.from_json(tiny_config_path)
        assert cfg.embedder == "concept"

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{nope")
        with pytest.raises(ParseError):
            ExperimentConfig.from_json(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "absent.json")


class TestOverrides:
    def test_seed_pins_data_and_runs(self):
        cfg = ExperimentConfig().apply_overrides(seed=42)
        assert cfg.data_seed == 42
        assert cfg.seeds == (42,)

    def test_strategy_narrows(self):
        cfg = ExperimentConfig().apply_overrides(strategy="replay")
        assert cfg.strategies == ("replay",)
        with pytest.raises(ConfigError):
            ExperimentConfig().apply_overrides(strategy="sgd")

    def test_workers_and_out(self):
        cfg = ExperimentConfig().apply_overrides(workers=3, out="/tmp/x")
        assert cfg.workers == 3
        assert cfg.out_dir == "/tmp/x"

    def test_none_overrides_keep_config(self):
        base = ExperimentConfig.from_dict(TINY_CONFIG)
        assert base.apply_overrides() == base


class TestSnapshot:
    def test_out_dir_normalized(self):
        cfg = ExperimentConfig().apply_overrides(out="/somewhere/else")
        snap = cfg.snapshot()
        assert snap["out_dir"] is None
        assert snap["train"]["lr"] == pytest.approx(2e-3)

    def test_snapshot_serializes_canonically(self):
        cfg = ExperimentConfig.from_dict(TINY_CONFIG)
        text = canonical_json(cfg.snapshot())
        assert json.loads(text)["synth"]["groups"][0]["overlap"] == 0.5
        assert text == canonical_json(cfg.snapshot())
