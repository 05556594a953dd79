"""Command-line front end.

Subcommands mirror the pipeline stages plus two conveniences:

    synth            generate the synthetic benchmark files
    pretrain-kg      train the relation embedder on the knowledge graph
    embed-relations  export relation vectors from the embedder checkpoint
    partition        write the task partition
    train            one continual run in identity task order
    study            the whole pipeline, stage-resumable (supports --dry-run)
    report           merge run logs into tables, metrics and figures

Exit codes: 0 success, 2 configuration/usage errors, 3 data errors
(missing or malformed files), 4 numeric errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ExperimentConfig
from .datasets import RunOrder
from .errors import ConfigError, DataError, NumericError
from .kgembed import load_relation_vectors
from .learner import train_sequence
from .numerics import Rng
from .pipeline import (
    Workspace,
    load_workspace_benchmark,
    run_pipeline,
    stage_embed_relations,
    stage_partition,
    stage_pretrain_kg,
    stage_report,
    stage_synth,
)
from .reporting import save_run_record

log = logging.getLogger("cml_lab")

OUT_ENV = "CML_LAB_OUT"


def add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH", help="experiment config JSON")
    sub.add_argument("--seed", type=int, metavar="N", help="override data seed and run seeds")
    sub.add_argument("--strategy", metavar="NAME", help="restrict to one training strategy")
    sub.add_argument("--workers", type=int, metavar="N", help="parallel run workers")
    sub.add_argument("--out", metavar="DIR", help=f"output directory (or ${OUT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cml-lab",
        description="continual relation learning lab: train, study, report",
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    specs = [
        ("synth", cmd_synth, "generate synthetic benchmark files"),
        ("pretrain-kg", cmd_pretrain_kg, "train the relation embedder"),
        ("embed-relations", cmd_embed_relations, "export relation vectors"),
        ("partition", cmd_partition, "write the task partition"),
        ("train", cmd_train, "one continual run in identity order"),
        ("study", cmd_study, "run the full pipeline"),
        ("report", cmd_report, "merge runs into tables and figures"),
    ]
    for name, func, desc in specs:
        sub = commands.add_parser(name, help=desc, description=desc)
        add_common(sub)
        if name == "study":
            sub.add_argument(
                "--dry-run", action="store_true", help="print the stage plan only"
            )
        sub.set_defaults(func=func)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    return cfg.apply_overrides(
        seed=args.seed, strategy=args.strategy, workers=args.workers, out=args.out
    )


def resolve_out(cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir or os.environ.get(OUT_ENV)
    if not out:
        raise ConfigError(
            f"no output directory: pass --out, set out_dir in the config, or set ${OUT_ENV}"
        )
    return Path(out)


def _workspace(args) -> tuple[ExperimentConfig, Workspace]:
    cfg = load_config(args)
    ws = Workspace(resolve_out(cfg))
    ws.root.mkdir(parents=True, exist_ok=True)
    return cfg, ws


def cmd_synth(args) -> int:
    cfg, ws = _workspace(args)
    stage_synth(cfg, ws)
    print(f"wrote benchmark files under {ws.data}")
    return 0


def cmd_pretrain_kg(args) -> int:
    cfg, ws = _workspace(args)
    stage_pretrain_kg(cfg, ws)
    print(f"wrote {ws.checkpoint} and {ws.trace}")
    return 0


def cmd_embed_relations(args) -> int:
    cfg, ws = _workspace(args)
    stage_embed_relations(cfg, ws)
    print(f"wrote {ws.vectors}")
    return 0


def cmd_partition(args) -> int:
    cfg, ws = _workspace(args)
    stage_partition(cfg, ws)
    print(f"wrote {ws.partition}")
    return 0


def cmd_train(args) -> int:
    cfg, ws = _workspace(args)
    benchmark = load_workspace_benchmark(cfg, ws)
    vectors = load_relation_vectors(ws.vectors) if ws.vectors.exists() else None
    strategy = cfg.strategies[0]
    seed = cfg.seeds[0]
    order = RunOrder(tuple(range(benchmark.num_tasks())), 0)
    record = train_sequence(
        benchmark, order, strategy, cfg.train, vectors, Rng(seed, order.offset)
    )
    run_dir = ws.run_dir(strategy, seed, order.offset)
    save_run_record(run_dir, record, seed)
    final = record.final()
    print(
        f"{strategy} seed={seed}: final acc_a={final.acc_a:.4f} "
        f"acc_w={final.acc_w:.4f} ({run_dir})"
    )
    return 0


def cmd_study(args) -> int:
    cfg, ws = _workspace(args)
    statuses = run_pipeline(cfg, ws.root, dry_run=args.dry_run)
    for name, status in statuses:
        print(f"{status:5s} {name}")
    if not args.dry_run:
        print(f"report: {ws.metrics}")
    return 0


def cmd_report(args) -> int:
    cfg, ws = _workspace(args)
    stage_report(cfg, ws)
    print(f"wrote report under {ws.report}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
