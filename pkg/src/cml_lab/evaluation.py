"""Order-sensitivity evaluation of continual runs.

Aggregates run records from many task permutations into a position-by-task
accuracy grid, scalar forgetting rates, confidence error bounds, and rank
correlations against difficulty priors. Report output is deliberately plain:
canonical JSON (sorted keys, fixed six-decimal floats) and delimited text,
so repeated runs of the same study are byte-identical.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datasets import Benchmark, RunOrder
from .errors import (
    ConfigError,
    DegenerateInputError,
    MissingCellError,
    NumericError,
    SchemaError,
)
from .learner import RunRecord, TrainConfig, train_sequence
from .numerics import Rng, as_vector, inverse_normal_cdf


def average_accuracy(per_task: Sequence[float]) -> float:
    """Macro average: unweighted mean of per-task accuracies."""
    v = as_vector(per_task, "per_task")
    if v.size == 0:
        raise DegenerateInputError("no per-task accuracies")
    return float(v.mean())


def whole_accuracy(correct: Sequence[int], totals: Sequence[int]) -> float:
    """Micro average: pooled correct count over pooled instance count."""
    c = np.asarray(correct, dtype=np.int64)
    t = np.asarray(totals, dtype=np.int64)
    if c.shape != t.shape or c.size == 0:
        raise DegenerateInputError("correct/total shape mismatch or empty")
    if np.any(c < 0) or np.any(t <= 0) or np.any(c > t):
        raise DegenerateInputError("need 0 <= correct <= total with total > 0")
    return float(c.sum() / t.sum())


def position_avg_accuracy(records: Sequence[RunRecord], num_tasks: int) -> np.ndarray:
    """Grid cell [i, j]: mean final accuracy on task j over runs that
    trained task j at position i. Every cell must be covered."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    sums = np.zeros((num_tasks, num_tasks))
    counts = np.zeros((num_tasks, num_tasks), dtype=int)
    for rec in records:
        if len(rec.order) != num_tasks:
            raise SchemaError(
                f"run order {rec.order} does not cover {num_tasks} tasks"
            )
        for i, j in enumerate(rec.order):
            sums[i, j] += rec.final_acc_for_task(j)
            counts[i, j] += 1
    if np.any(counts == 0):
        i, j = map(int, np.argwhere(counts == 0)[0])
        raise MissingCellError(f"no run trained task {j} at position {i}")
    return sums / counts


def forgetting_rate(position_means: Sequence[float]) -> float:
    """Mean relative change of accuracy between adjacent positions."""
    m = as_vector(position_means, "position_means")
    if m.size < 2:
        raise DegenerateInputError("forgetting rate needs at least 2 positions")
    if np.any(m[:-1] <= 0):
        raise DegenerateInputError("position accuracies must be positive")
    return float(((m[1:] - m[:-1]) / m[:-1]).mean())


def per_task_forgetting(matrix: np.ndarray) -> np.ndarray:
    """Forgetting rate of each task's own column across positions."""
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DegenerateInputError(f"expected square grid, got {mat.shape}")
    return np.array([forgetting_rate(mat[:, j]) for j in range(mat.shape[1])])


def error_bound_from_stats(std: float, n: int, alpha: float = 0.95) -> float:
    """Half-width of the alpha confidence interval: z_(1+alpha)/2 * std/sqrt(n)."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if std < 0:
        raise DegenerateInputError("std must be non-negative")
    return inverse_normal_cdf((1.0 + alpha) / 2.0) * std / math.sqrt(n)


def error_bound(values: Sequence[float], alpha: float = 0.95) -> float:
    v = as_vector(values, "values")
    if v.size < 2:
        raise DegenerateInputError("error bound needs at least 2 values")
    return error_bound_from_stats(float(v.std(ddof=1)), v.size, alpha)


def pearson_cc(x: Sequence[float], y: Sequence[float]) -> float:
    vx = as_vector(x, "x")
    vy = as_vector(y, "y")
    if vx.shape != vy.shape or vx.size < 2:
        raise DegenerateInputError("need two equal-length series of size >= 2")
    dx = vx - vx.mean()
    dy = vy - vy.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        raise DegenerateInputError("zero variance series")
    return float(dx @ dy) / denom


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_cc(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    vx = as_vector(x, "x")
    vy = as_vector(y, "y")
    if vx.shape != vy.shape or vx.size < 2:
        raise DegenerateInputError("need two equal-length series of size >= 2")
    return pearson_cc(_average_ranks(vx), _average_ranks(vy))


def difficulty_correlation(difficulties: Sequence[float], matrix: np.ndarray) -> float:
    """Pearson correlation between task difficulty priors and how strongly
    each task's accuracy depends on its training position."""
    d = as_vector(difficulties, "difficulties")
    fr = per_task_forgetting(matrix)
    if d.size != fr.size:
        raise DegenerateInputError(f"{d.size} difficulties for {fr.size} tasks")
    return pearson_cc(d, fr)


def cyclic_orders(num_tasks: int) -> list[RunOrder]:
    """K rotations of the identity order; covers every (position, task)
    cell exactly once."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    return [
        RunOrder(tuple((i + m) % num_tasks for i in range(num_tasks)), m)
        for m in range(num_tasks)
    ]


def exhaustive_orders(num_tasks: int) -> list[RunOrder]:
    if not 1 <= num_tasks <= 8:
        raise ConfigError("exhaustive protocol supports 1..8 tasks")
    return [
        RunOrder(tuple(p), m)
        for m, p in enumerate(itertools.permutations(range(num_tasks)))
    ]


def monte_carlo_orders(num_tasks: int, count: int, rng: Rng) -> list[RunOrder]:
    if num_tasks < 1 or count < 1:
        raise ConfigError("num_tasks and count must be >= 1")
    return [
        RunOrder(tuple(int(x) for x in rng.child(m).generator.permutation(num_tasks)), m)
        for m in range(count)
    ]


PROTOCOLS = ("cyclic", "exhaustive", "monte_carlo")


@dataclass(frozen=True)
class PermutationStudy:
    protocol: str
    orders: tuple[RunOrder, ...]


def make_study(
    protocol: str, num_tasks: int, rng: Rng | None = None, count: int | None = None
) -> PermutationStudy:
    if protocol == "cyclic":
        orders = cyclic_orders(num_tasks)
    elif protocol == "exhaustive":
        orders = exhaustive_orders(num_tasks)
    elif protocol == "monte_carlo":
        if rng is None or count is None:
            raise ConfigError("monte_carlo protocol needs rng and count")
        orders = monte_carlo_orders(num_tasks, count, rng)
    else:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    return PermutationStudy(protocol=protocol, orders=tuple(orders))


def _run_one(job) -> RunRecord:
    benchmark, order, strategy, cfg, vectors, seed = job
    return train_sequence(benchmark, order, strategy, cfg, vectors, Rng(seed, order.offset))


def run_study(
    benchmark: Benchmark,
    study: PermutationStudy,
    strategy: str,
    cfg: TrainConfig,
    vectors: Mapping[str, np.ndarray] | None,
    seed: int,
    workers: int = 1,
) -> list[RunRecord]:
    """Train one run per order; the run's random stream is (seed, offset),
    so results do not depend on scheduling or worker count."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    jobs = [(benchmark, order, strategy, cfg, vectors, seed) for order in study.orders]
    if workers == 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def _canon(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            raise NumericError("non-finite value in report")
        if f == 0.0:
            f = 0.0
        return f"{f:.6f}"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    if isinstance(obj, dict):
        for k in obj:
            if not isinstance(k, str):
                raise SchemaError(f"report keys must be strings, got {type(k).__name__}")
        items = (f"{json.dumps(k)}:{_canon(obj[k])}" for k in sorted(obj))
        return "{" + ",".join(items) + "}"
    raise SchemaError(f"cannot serialize {type(obj).__name__} in report")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, six-decimal floats, one newline.

    Serializing the same logical content always yields identical bytes."""
    return _canon(obj) + "\n"


def _forgetting_or_none(series) -> float | None:
    """Relative forgetting is undefined once a position mean hits zero (or
    with a single task); the report records null there instead of failing."""
    try:
        return forgetting_rate(series)
    except DegenerateInputError:
        return None


def build_metrics_report(
    records_by_strategy: Mapping[str, Sequence[RunRecord]],
    num_tasks: int,
    config: dict | None = None,
    seeds: Sequence[int] = (),
    position_metrics: bool = True,
) -> dict:
    strategies = {}
    for name in sorted(records_by_strategy):
        recs = list(records_by_strategy[name])
        if not recs:
            raise SchemaError(f"strategy {name!r} has no runs")
        finals_a = [r.final().acc_a for r in recs]
        finals_w = [r.final().acc_w for r in recs]
        entry: dict = {
            "runs": len(recs),
            "acc_a_mean": float(np.mean(finals_a)),
            "acc_a_std": float(np.std(finals_a, ddof=1)) if len(recs) > 1 else 0.0,
            "acc_w_mean": float(np.mean(finals_w)),
            "acc_w_std": float(np.std(finals_w, ddof=1)) if len(recs) > 1 else 0.0,
            "error_bound_95": error_bound(finals_a) if len(recs) > 1 else None,
        }
        if position_metrics:
            matrix = position_avg_accuracy(recs, num_tasks)
            entry["position_accuracy"] = matrix.tolist()
            entry["position_means"] = matrix.mean(axis=1).tolist()
            entry["forgetting_rate"] = _forgetting_or_none(matrix.mean(axis=1))
            entry["per_task_forgetting"] = [
                _forgetting_or_none(matrix[:, j]) for j in range(matrix.shape[1])
            ]
        strategies[name] = entry
    return {
        "schema_version": 1,
        "num_tasks": num_tasks,
        "seeds": [int(s) for s in seeds],
        "config": config,
        "strategies": strategies,
    }


def save_metrics_report(path, report: dict) -> None:
    Path(path).write_text(canonical_json(report), encoding="utf-8")


def save_position_grid_csv(path, matrix: np.ndarray) -> None:
    """Position-by-task accuracy grid with per-column mean/std footer."""
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] < 1:
        raise DegenerateInputError(f"expected square grid, got {mat.shape}")
    k = mat.shape[0]
    lines = ["position," + ",".join(f"task_{j}" for j in range(k)) + ",row_mean"]
    for i in range(k):
        cells = ",".join(f"{mat[i, j]:.6f}" for j in range(k))
        lines.append(f"{i},{cells},{mat[i].mean():.6f}")
    mu = ",".join(f"{mat[:, j].mean():.6f}" for j in range(k))
    lines.append(f"mean,{mu},{mat.mean():.6f}")
    if k > 1:
        sd = ",".join(f"{mat[:, j].std(ddof=1):.6f}" for j in range(k))
        lines.append(f"std,{sd},")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
