import json
import shutil
import subprocess
import sys

import pytest

from cml_lab.cli import main
from cml_lab.pipeline import Workspace


class TestCliCommands:
    def test_synth_writes_data(self, tiny_config_path, tmp_path, capsys):
        out = tmp_path / "study"
        code = main(["synth", "--config", str(tiny_config_path), "--out", str(out)])
        assert code == 0
        assert (out / "data" / "instances.jsonl").exists()
        assert "wrote benchmark files" in capsys.readouterr().out

    def test_study_dry_run_prints_plan(self, tiny_config_path, tmp_path, capsys):
        out = tmp_path / "study"
        code = main(["study", "--config", str(tiny_config_path), "--out", str(out),
                     "--dry-run"])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert "plan  synth" in lines
        assert "plan  report" in lines
        assert not (out / "data").exists()

    def test_full_study_then_report_rerun(self, tiny_config_path, tmp_path, capsys):
        out = tmp_path / "study"
        assert main(["study", "--config", str(tiny_config_path), "--out", str(out)]) == 0
        ws = Workspace(out)
        assert ws.metrics.exists()
        first = ws.metrics.read_bytes()
        shutil.rmtree(ws.report)
        assert main(["report", "--config", str(tiny_config_path), "--out", str(out)]) == 0
        assert ws.metrics.read_bytes() == first

    def test_stagewise_matches_study(self, tiny_config_path, tmp_path):
        a = tmp_path / "a"
        for cmd in ("synth", "pretrain-kg", "embed-relations", "partition"):
            assert main([cmd, "--config", str(tiny_config_path), "--out", str(a)]) == 0
        assert main(["study", "--config", str(tiny_config_path), "--out", str(a)]) == 0
        b = tmp_path / "b"
        assert main(["study", "--config", str(tiny_config_path), "--out", str(b)]) == 0
        assert Workspace(a).metrics.read_bytes() == Workspace(b).metrics.read_bytes()

    def test_train_single_run(self, tiny_config_path, tmp_path, capsys):
        out = tmp_path / "study"
        assert main(["synth", "--config", str(tiny_config_path), "--out", str(out)]) == 0
        assert main(["partition", "--config", str(tiny_config_path), "--out", str(out)]) == 0
        code = main(["train", "--config", str(tiny_config_path), "--out", str(out),
                     "--strategy", "vanilla", "--seed", "7"])
        assert code == 0
        assert "final acc_a=" in capsys.readouterr().out
        run_dir = out / "runs" / "vanilla" / "seed0007" / "run000"
        assert (run_dir / "log.jsonl").exists()
        meta = json.loads((run_dir / "run.json").read_text())
        assert meta["seed"] == 7 and meta["strategy"] == "vanilla"


class TestCliErrors:
    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"bogus": 1}))
        code = main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_data_is_data_error(self, tiny_config_path, tmp_path, capsys):
        code = main(["pretrain-kg", "--config", str(tiny_config_path),
                     "--out", str(tmp_path / "empty")])
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_no_out_dir_anywhere(self, tiny_config_path, monkeypatch, capsys):
        monkeypatch.delenv("CML_LAB_OUT", raising=False)
        code = main(["synth", "--config", str(tiny_config_path)])
        assert code == 2
        assert "output directory" in capsys.readouterr().err

    def test_out_env_fallback(self, tiny_config_path, tmp_path, monkeypatch):
        out = tmp_path / "via-env"
        monkeypatch.setenv("CML_LAB_OUT", str(out))
        assert main(["synth", "--config", str(tiny_config_path)]) == 0
        assert (out / "data" / "instances.jsonl").exists()

    def test_bad_strategy_flag(self, tiny_config_path, tmp_path, capsys):
        code = main(["train", "--config", str(tiny_config_path),
                     "--out", str(tmp_path / "o"), "--strategy", "sgd"])
        assert code == 2

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 2
        assert "COMMAND" in capsys.readouterr().err


class TestConsoleScript:
    def test_installed_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "cml_lab.cli", "--help"],
            capture_output=True, text=True, timeout=60,
        )
        assert proc.returncode == 0
        assert "study" in proc.stdout
