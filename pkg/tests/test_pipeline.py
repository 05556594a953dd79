import json
import shutil

import numpy as np
import pytest

from cml_lab.config import ExperimentConfig
from cml_lab.errors import MergeError
from cml_lab.pipeline import Workspace, load_workspace_benchmark, run_pipeline
from cml_lab.reporting import collect_run_records, load_run_record

from conftest import TINY_CONFIG


def tiny_cfg() -> ExperimentConfig:
    return ExperimentConfig.from_dict(TINY_CONFIG)


class TestPipeline:
    def test_fresh_run_executes_all_stages(self, tmp_path):
        out = tmp_path / "study"
        statuses = run_pipeline(tiny_cfg(), out)
        assert [s for _, s in statuses] == ["run"] * 6
        ws = Workspace(out)
        for p in (
            ws.instances, ws.triples, ws.concepts, ws.designed_partition,
            ws.designed_similarity, ws.partition, ws.checkpoint, ws.trace,
            ws.vectors, ws.metrics,
        ):
            assert p.exists(), p
        assert (ws.report / "summary.csv").exists()
        assert (ws.report / "grid_replay.csv").exists()
        assert (ws.report / "grid_vanilla.csv").exists()
        assert (ws.report / "difficulty.csv").exists()
        for png in (ws.report / "figures").glob("*.png"):
            assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(list((ws.report / "figures").glob("*.png"))) == 4

    def test_second_invocation_skips_everything(self, tmp_path):
        out = tmp_path / "study"
        run_pipeline(tiny_cfg(), out)
        statuses = run_pipeline(tiny_cfg(), out)
        assert [s for _, s in statuses] == ["skip"] * 6

    def test_dry_run_plans_without_writing(self, tmp_path):
        out = tmp_path / "study"
        statuses = run_pipeline(tiny_cfg(), out, dry_run=True)
        assert [s for _, s in statuses] == ["plan"] * 6
        assert not Workspace(out).instances.exists()
        assert not Workspace(out).metrics.exists()

    def test_metrics_byte_identical_across_directories(self, tmp_path):
        run_pipeline(tiny_cfg(), tmp_path / "a")
        run_pipeline(tiny_cfg(), tmp_path / "b")
        a = (tmp_path / "a" / "report" / "metrics.json").read_bytes()
        b = (tmp_path / "b" / "report" / "metrics.json").read_bytes()
        assert a == b
        obj = json.loads(a)
        assert obj["config"]["out_dir"] is None
        assert set(obj["strategies"]) == {"replay", "vanilla"}

    def test_resume_recomputes_identical_metrics(self, tmp_path):
        out = tmp_path / "study"
        run_pipeline(tiny_cfg(), out)
        ws = Workspace(out)
        original = ws.metrics.read_bytes()
        shutil.rmtree(ws.run_dir("replay", 1, 0))
        shutil.rmtree(ws.report)
        statuses = dict(run_pipeline(tiny_cfg(), out))
        assert statuses["synth"] == "skip"
        assert statuses["runs"] == "run"
        assert statuses["report"] == "run"
        assert ws.metrics.read_bytes() == original

    def test_benchmark_round_trip_consistent(self, tmp_path):
        out = tmp_path / "study"
        run_pipeline(tiny_cfg(), out)
        ws = Workspace(out)
        bm1 = load_workspace_benchmark(tiny_cfg(), ws)
        bm2 = load_workspace_benchmark(tiny_cfg(), ws)
        assert bm1.relations() == bm2.relations()
        assert bm1.tasks[0].train == bm2.tasks[0].train


class TestDegenerateReport:
    def test_zero_accuracy_run_still_renders(self, tmp_path):
        # a task stuck at zero accuracy makes relative forgetting undefined;
        # the report must still come out (null in JSON, nan in the CSV)
        from cml_lab.learner import RunRecord, StepLog
        from cml_lab.reporting import write_report

        def rec(order, accs, offset):
            per_task = {str(t): accs[t] for t in order}
            step = StepLog(
                step=2, trained_task=order[-1], per_task_acc=per_task,
                acc_a=float(np.mean(list(accs.values()))),
                acc_w=float(np.mean(list(accs.values()))),
            )
            steps = [StepLog(1, order[0], per_task, 0.0, 0.0), step]
            return RunRecord("vanilla", order, offset, steps=steps)

        records = {
            "vanilla": [
                rec((0, 1), {0: 0.0, 1: 0.8}, 0),
                rec((1, 0), {0: 0.6, 1: 0.4}, 1),
            ]
        }
        report = write_report(
            tmp_path, records, 2, None, [0], difficulties=[0.3, 0.7], figures=True
        )
        assert report["strategies"]["vanilla"]["per_task_forgetting"][0] is None
        assert '"per_task_forgetting":[null,' in (tmp_path / "metrics.json").read_text()
        difficulty = (tmp_path / "difficulty.csv").read_text()
        assert "nan" in difficulty
        assert (tmp_path / "figures" / "forgetting.png").exists()


class TestRunRecordIo:
    def test_collect_groups_and_sorts(self, tmp_path):
        out = tmp_path / "study"
        run_pipeline(tiny_cfg(), out)
        ws = Workspace(out)
        by_strategy, seeds = collect_run_records(ws.runs)
        assert set(by_strategy) == {"replay", "vanilla"}
        assert seeds == [0, 1]
        # 2 seeds x 2 cyclic orders
        assert len(by_strategy["replay"]) == 4

    def test_load_run_record_checks_consistency(self, tmp_path):
        out = tmp_path / "study"
        run_pipeline(tiny_cfg(), out)
        ws = Workspace(out)
        run_dir = ws.run_dir("replay", 0, 0)
        record, seed = load_run_record(run_dir)
        assert seed == 0
        assert record.strategy == "replay"
        meta = json.loads((run_dir / "run.json").read_text())
        meta["order"] = list(reversed(meta["order"]))
        (run_dir / "run.json").write_text(json.dumps(meta))
        with pytest.raises(MergeError):
            load_run_record(run_dir)

    def test_collect_rejects_missing_runs_dir(self, tmp_path):
        with pytest.raises(MergeError):
            collect_run_records(tmp_path / "none")
