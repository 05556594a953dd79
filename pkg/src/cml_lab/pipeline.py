"""End-to-end study pipeline over a single output directory.

Stages write their outputs under the workspace root and are skipped when
those outputs already exist, so an interrupted study resumes where it
stopped:

    data/    synthesized instances, triples, concepts, partitions
    kg/      embedder checkpoint, training trace, relation vectors
    runs/    one directory per (strategy, seed, order) run
    report/  merged tables, canonical metrics, figures

Random streams are addressed by purpose: the benchmark, the embedders, the
partition, and the train/test split each draw from fixed stream ids of the
data seed, while run m of a study draws from stream m of its study seed.
Together with worker-count-independent scheduling this makes the final
metrics report byte-identical across repeated invocations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .curriculum import relation_similarity_matrix, task_difficulty
from .datasets import (
    Benchmark,
    build_benchmark,
    generate_synthetic,
    load_jsonl,
    load_partition,
    partition_kmeans,
    partition_random,
    save_jsonl,
    save_partition,
    split_train_test,
)
from .errors import SchemaError
from .evaluation import PermutationStudy, make_study, run_study
from .kgembed import (
    KnowledgeGraph,
    load_concepts_tsv,
    load_relation_vectors,
    load_triples_tsv,
    save_concepts_tsv,
    save_relation_vectors,
    save_triples_tsv,
    train_concept_model,
    train_transe,
)
from .numerics import Rng, load_checkpoint, save_checkpoint
from .reporting import collect_run_records, save_run_record, write_report

log = logging.getLogger("cml_lab")

# Fixed stream ids of the data seed, one per deterministic purpose.
STREAM_SYNTH = 0
STREAM_TRANSE = 1
STREAM_CONCEPT = 2
STREAM_PARTITION = 3
STREAM_SPLIT = 4


class Workspace:
    """Path layout of one study's output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.kg = self.root / "kg"
        self.runs = self.root / "runs"
        self.report = self.root / "report"
        self.instances = self.data / "instances.jsonl"
        self.triples = self.data / "triples.tsv"
        self.concepts = self.data / "concepts.tsv"
        self.designed_partition = self.data / "designed_partition.json"
        self.designed_similarity = self.data / "designed_similarity.json"
        self.partition = self.data / "partition.json"
        self.checkpoint = self.kg / "embedder.ckpt"
        self.trace = self.kg / "trace.json"
        self.vectors = self.kg / "relations.vec"
        self.metrics = self.report / "metrics.json"

    def run_dir(self, strategy: str, seed: int, offset: int) -> Path:
        return self.runs / strategy / f"seed{seed:04d}" / f"run{offset:03d}"


def stage_synth(cfg: ExperimentConfig, ws: Workspace) -> None:
    ws.data.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(cfg.synth, Rng(cfg.data_seed, STREAM_SYNTH))
    instances = [x for t in data.benchmark.tasks for x in t.train_instances()]
    instances += [x for t in data.benchmark.tasks for x in t.test_instances()]
    save_jsonl(ws.instances, instances)
    save_triples_tsv(ws.triples, data.triples)
    save_concepts_tsv(ws.concepts, data.entity_concepts)
    save_partition(ws.designed_partition, data.partition)
    ws.designed_similarity.write_text(
        json.dumps(
            {
                "relation_order": data.relation_order,
                "similarity": data.designed_similarity.tolist(),
            },
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )


def _load_kg(ws: Workspace) -> KnowledgeGraph:
    return KnowledgeGraph(
        triples=load_triples_tsv(ws.triples),
        entity_concepts=load_concepts_tsv(ws.concepts),
    )


def stage_pretrain_kg(cfg: ExperimentConfig, ws: Workspace) -> None:
    ws.kg.mkdir(parents=True, exist_ok=True)
    kg = _load_kg(ws)
    if cfg.embedder == "transe":
        model, trace = train_transe(kg, cfg.transe, Rng(cfg.data_seed, STREAM_TRANSE))
    else:
        model, trace = train_concept_model(kg, cfg.concept, Rng(cfg.data_seed, STREAM_CONCEPT))
    save_checkpoint(ws.checkpoint, model.params())
    ws.trace.write_text(
        json.dumps({"embedder": cfg.embedder, "epoch_loss": trace}, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def stage_embed_relations(cfg: ExperimentConfig, ws: Workspace) -> None:
    kg = _load_kg(ws)
    params = {p.name: p for p in load_checkpoint(ws.checkpoint)}
    rel_name = "transe.rel" if cfg.embedder == "transe" else "concept.rel"
    if rel_name not in params:
        raise SchemaError(
            f"{ws.checkpoint}: no {rel_name!r} tensor; was it trained with "
            f"embedder={cfg.embedder!r}?"
        )
    table = params[rel_name].value
    if table.shape[0] != len(kg.relations):
        raise SchemaError(
            f"{ws.checkpoint}: {table.shape[0]} relation rows for "
            f"{len(kg.relations)} relations"
        )
    save_relation_vectors(ws.vectors, {r: table[i] for i, r in enumerate(kg.relations)})


def stage_partition(cfg: ExperimentConfig, ws: Workspace) -> None:
    if cfg.partition == "designed":
        save_partition(ws.partition, load_partition(ws.designed_partition))
        return
    relations = sorted({x.relation for x in load_jsonl(ws.instances)})
    rng = Rng(cfg.data_seed, STREAM_PARTITION)
    if cfg.partition == "random":
        parts = partition_random(relations, cfg.synth.num_tasks, rng)
    else:
        parts = partition_kmeans(load_relation_vectors(ws.vectors), cfg.synth.num_tasks, rng)
    save_partition(ws.partition, parts)


def load_workspace_benchmark(cfg: ExperimentConfig, ws: Workspace) -> Benchmark:
    instances = load_jsonl(ws.instances)
    partition = load_partition(ws.partition)
    train, test = split_train_test(
        instances, cfg.test_fraction, Rng(cfg.data_seed, STREAM_SPLIT)
    )
    return build_benchmark(train, test, partition)


def expected_run_dirs(cfg: ExperimentConfig, ws: Workspace) -> list[tuple[str, int, Path]]:
    num_tasks = cfg.synth.num_tasks
    count = {
        "cyclic": num_tasks,
        "exhaustive": math.factorial(num_tasks),
        "monte_carlo": cfg.mc_runs,
    }[cfg.protocol]
    out = []
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            for offset in range(count):
                out.append((strategy, seed, ws.run_dir(strategy, seed, offset)))
    return out


def stage_runs(cfg: ExperimentConfig, ws: Workspace) -> None:
    benchmark = load_workspace_benchmark(cfg, ws)
    vectors = load_relation_vectors(ws.vectors)
    num_tasks = benchmark.num_tasks()
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            study = make_study(
                cfg.protocol, num_tasks, rng=Rng(seed, 1_000_000), count=cfg.mc_runs
            )
            todo = [
                o for o in study.orders
                if not (ws.run_dir(strategy, seed, o.offset) / "log.jsonl").exists()
            ]
            if not todo:
                continue
            log.info(
                "training %s seed=%d: %d/%d runs", strategy, seed, len(todo), len(study.orders)
            )
            partial = PermutationStudy(protocol=study.protocol, orders=tuple(todo))
            records = run_study(
                benchmark, partial, strategy, cfg.train, vectors, seed, workers=cfg.workers
            )
            for rec in records:
                save_run_record(ws.run_dir(strategy, seed, rec.offset), rec, seed)


def _difficulty_prior(cfg: ExperimentConfig, ws: Workspace) -> list[float] | None:
    """Per-task difficulty from the designed similarity when available,
    otherwise from the learned relation vectors."""
    partition = load_partition(ws.partition)
    if ws.designed_similarity.exists():
        obj = json.loads(ws.designed_similarity.read_text(encoding="utf-8"))
        order = list(obj["relation_order"])
        sim = np.asarray(obj["similarity"], dtype=np.float64)
    else:
        vectors = load_relation_vectors(ws.vectors)
        order = sorted(vectors)
        sim = relation_similarity_matrix(vectors, order)
    return task_difficulty(sim, order, partition).tolist()


def stage_report(cfg: ExperimentConfig, ws: Workspace) -> None:
    by_strategy, seeds = collect_run_records(ws.runs)
    num_tasks = load_workspace_benchmark(cfg, ws).num_tasks()
    write_report(
        ws.report,
        by_strategy,
        num_tasks,
        config_snapshot=cfg.snapshot(),
        seeds=seeds,
        difficulties=_difficulty_prior(cfg, ws),
    )


@dataclass
class Stage:
    name: str
    done: Callable[[], bool]
    run: Callable[[], None]


def plan_stages(cfg: ExperimentConfig, ws: Workspace) -> list[Stage]:
    def runs_done() -> bool:
        dirs = expected_run_dirs(cfg, ws)
        return all((d / "log.jsonl").exists() for _, _, d in dirs)

    return [
        Stage(
            "synth",
            lambda: all(
                p.exists()
                for p in (ws.instances, ws.triples, ws.concepts, ws.designed_partition)
            ),
            lambda: stage_synth(cfg, ws),
        ),
        Stage("pretrain-kg", ws.checkpoint.exists, lambda: stage_pretrain_kg(cfg, ws)),
        Stage("embed-relations", ws.vectors.exists, lambda: stage_embed_relations(cfg, ws)),
        Stage("partition", ws.partition.exists, lambda: stage_partition(cfg, ws)),
        Stage("runs", runs_done, lambda: stage_runs(cfg, ws)),
        Stage("report", ws.metrics.exists, lambda: stage_report(cfg, ws)),
    ]


def run_pipeline(
    cfg: ExperimentConfig, out_dir, dry_run: bool = False
) -> list[tuple[str, str]]:
    """Execute (or with dry_run just plan) all stages; returns
    (stage, status) pairs where status is one of run/skip/plan."""
    ws = Workspace(out_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    statuses: list[tuple[str, str]] = []
    for stage in plan_stages(cfg, ws):
        if stage.done():
            statuses.append((stage.name, "skip"))
            log.info("stage %-16s skip (outputs exist)", stage.name)
        elif dry_run:
            statuses.append((stage.name, "plan"))
            log.info("stage %-16s plan", stage.name)
        else:
            log.info("stage %-16s run", stage.name)
            stage.run()
            statuses.append((stage.name, "run"))
    return statuses
