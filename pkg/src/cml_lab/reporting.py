"""Report rendering: merged tables, canonical metrics, and figures.

Consumes per-run logs collected from a study's output directory and writes
the comparison artifacts: a strategy summary table, one position-by-task
grid per strategy, an optional difficulty/forgetting table against a prior,
the canonical metrics JSON, and PNG figures. Figures are rendered here at
the reporting boundary; the metric computations themselves never touch
plotting code.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, MergeError, NumericError, ParseError, SchemaError
from .evaluation import (
    build_metrics_report,
    forgetting_rate,
    pearson_cc,
    position_avg_accuracy,
    save_metrics_report,
    save_position_grid_csv,
)
from .learner import RunRecord, load_steps_jsonl

RUN_META = "run.json"
RUN_LOG = "log.jsonl"


def load_run_record(run_dir) -> tuple[RunRecord, int]:
    """Read one run directory; returns the record and the seed it ran under."""
    run_dir = Path(run_dir)
    meta_path = run_dir / RUN_META
    log_path = run_dir / RUN_LOG
    if not meta_path.exists() or not log_path.exists():
        raise MergeError(f"{run_dir}: incomplete run (needs {RUN_META} and {RUN_LOG})")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: invalid JSON: {exc}") from exc
    needed = {"strategy", "order", "offset", "seed"}
    if not isinstance(meta, dict) or not needed <= set(meta):
        raise SchemaError(f"{meta_path}: expected keys {sorted(needed)}")
    steps = load_steps_jsonl(log_path)
    order = tuple(int(t) for t in meta["order"])
    if len(steps) != len(order):
        raise MergeError(f"{run_dir}: {len(steps)} steps for {len(order)} tasks")
    if [s.trained_task for s in steps] != list(order):
        raise MergeError(f"{run_dir}: log task sequence does not match run order")
    record = RunRecord(
        strategy=str(meta["strategy"]), order=order, offset=int(meta["offset"]), steps=steps
    )
    return record, int(meta["seed"])


def save_run_record(run_dir, record: RunRecord, seed: int) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "strategy": record.strategy,
        "order": list(record.order),
        "offset": record.offset,
        "seed": seed,
    }
    (run_dir / RUN_META).write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    from .learner import save_steps_jsonl

    save_steps_jsonl(run_dir / RUN_LOG, record.steps)


def collect_run_records(runs_root) -> tuple[dict[str, list[RunRecord]], list[int]]:
    """Gather all run directories under runs/<strategy>/seed*/run*.

    Returns records grouped by strategy plus the sorted seeds found.
    Duplicate (strategy, seed, offset) triples are a merge error.
    """
    runs_root = Path(runs_root)
    if not runs_root.is_dir():
        raise MergeError(f"{runs_root}: no runs directory")
    by_strategy: dict[str, list[RunRecord]] = {}
    seen: set[tuple[str, int, int]] = set()
    seeds: set[int] = set()
    for meta_path in sorted(runs_root.glob("*/seed*/run*/" + RUN_META)):
        record, seed = load_run_record(meta_path.parent)
        key = (record.strategy, seed, record.offset)
        if key in seen:
            raise MergeError(f"duplicate run: strategy={key[0]} seed={key[1]} offset={key[2]}")
        seen.add(key)
        seeds.add(seed)
        by_strategy.setdefault(record.strategy, []).append(record)
    if not by_strategy:
        raise MergeError(f"{runs_root}: no completed runs found")
    for recs in by_strategy.values():
        recs.sort(key=lambda r: r.offset)
    return by_strategy, sorted(seeds)


def _fmt(x) -> str:
    return "" if x is None else f"{float(x):.6f}"


def write_summary_csv(path, report: dict) -> None:
    lines = [
        "strategy,runs,acc_a_mean,acc_a_std,acc_w_mean,acc_w_std,"
        "error_bound_95,forgetting_rate"
    ]
    for name in sorted(report["strategies"]):
        s = report["strategies"][name]
        lines.append(
            ",".join(
                [
                    name,
                    str(s["runs"]),
                    _fmt(s["acc_a_mean"]),
                    _fmt(s["acc_a_std"]),
                    _fmt(s["acc_w_mean"]),
                    _fmt(s["acc_w_std"]),
                    _fmt(s["error_bound_95"]),
                    _fmt(s.get("forgetting_rate")),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _safe_pearson(x, y) -> float:
    """Correlation for report footers: nan when undefined (constant series,
    fewer than two tasks, or nan entries) instead of refusing the study."""
    try:
        return pearson_cc(x, y)
    except (DegenerateInputError, NumericError):
        return float("nan")


def _safe_per_task_forgetting(matrix: np.ndarray) -> np.ndarray:
    """Per-task forgetting for rendering: nan where a task's position series
    is degenerate (zero accuracy somewhere) instead of refusing the study."""
    cols = []
    for j in range(matrix.shape[1]):
        try:
            cols.append(forgetting_rate(matrix[:, j]))
        except DegenerateInputError:
            cols.append(float("nan"))
    return np.array(cols)


def write_difficulty_csv(
    path,
    difficulties: Sequence[float],
    matrices: Mapping[str, np.ndarray],
) -> None:
    """Per-task difficulty prior against per-task forgetting per strategy,
    with a Pearson correlation footer."""
    names = sorted(matrices)
    fr = {n: _safe_per_task_forgetting(matrices[n]) for n in names}
    k = len(difficulties)
    for n in names:
        if fr[n].size != k:
            raise SchemaError(f"{n}: grid covers {fr[n].size} tasks, expected {k}")
    lines = ["task_id,difficulty," + ",".join(f"fr_{n}" for n in names)]
    for t in range(k):
        cells = ",".join(_fmt(fr[n][t]) for n in names)
        lines.append(f"{t},{_fmt(difficulties[t])},{cells}")
    corr = ",".join(_fmt(_safe_pearson(difficulties, fr[n])) for n in names)
    lines.append(f"pearson,,{corr}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_figures(
    fig_dir, records_by_strategy: Mapping[str, Sequence[RunRecord]], num_tasks: int
) -> list[Path]:
    """PNG figures: mean accuracy trajectory per strategy, final forgetting
    comparison, and one position-grid heatmap per strategy."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    names = sorted(records_by_strategy)

    fig, ax = plt.subplots(figsize=(6, 4))
    steps = list(range(1, num_tasks + 1))
    for name in names:
        recs = records_by_strategy[name]
        means = [float(np.mean([r.steps[i].acc_a for r in recs])) for i in range(num_tasks)]
        ax.plot(steps, means, marker="o", label=name)
    ax.set_xlabel("tasks trained")
    ax.set_ylabel("average accuracy on seen tasks")
    ax.set_xticks(steps)
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = fig_dir / "accuracy_curves.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    matrices = {n: position_avg_accuracy(records_by_strategy[n], num_tasks) for n in names}
    fig, ax = plt.subplots(figsize=(5, 4))
    frs = []
    for n in names:
        fr = _safe_per_task_forgetting(matrices[n])
        finite = fr[np.isfinite(fr)]
        frs.append(float(finite.mean()) if finite.size else float("nan"))
    ax.bar(range(len(names)), frs)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mean per-task forgetting rate")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = fig_dir / "forgetting.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    for name in names:
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(matrices[name], vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_xlabel("task")
        ax.set_ylabel("training position")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, label="final accuracy")
        fig.tight_layout()
        path = fig_dir / f"position_grid_{name}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def write_report(
    report_dir,
    records_by_strategy: Mapping[str, Sequence[RunRecord]],
    num_tasks: int,
    config_snapshot: dict | None,
    seeds: Sequence[int],
    difficulties: Sequence[float] | None = None,
    figures: bool = True,
) -> dict:
    """Write all report artifacts into ``report_dir``; returns the metrics
    report that was serialized."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    report = build_metrics_report(
        records_by_strategy, num_tasks, config=config_snapshot, seeds=seeds
    )
    save_metrics_report(report_dir / "metrics.json", report)
    write_summary_csv(report_dir / "summary.csv", report)
    matrices = {
        name: position_avg_accuracy(recs, num_tasks)
        for name, recs in records_by_strategy.items()
    }
    for name, mat in sorted(matrices.items()):
        save_position_grid_csv(report_dir / f"grid_{name}.csv", mat)
    if difficulties is not None:
        write_difficulty_csv(report_dir / "difficulty.csv", difficulties, matrices)
    if figures:
        render_figures(report_dir / "figures", records_by_strategy, num_tasks)
    return report
