"""Experiment configuration: one JSON file describing a whole study.

Parsing is strict: unknown keys anywhere in the document are rejected with
their dotted path, so typos fail fast instead of silently running defaults.
Command-line flags override a loaded config; the snapshot embedded in
reports normalizes the output directory away so reports produced in
different locations stay byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .datasets import SimilarityGroup, SynthConfig
from .errors import ConfigError, ParseError
from .evaluation import PROTOCOLS
from .kgembed import ConceptConfig, TransEConfig
from .learner import STRATEGIES, TrainConfig

EMBEDDERS = ("concept", "transe")
PARTITIONS = ("designed", "random", "kmeans")


def _check_unknown(obj: dict, known: set[str], path: str) -> None:
    unknown = sorted(set(obj) - known)
    if unknown:
        dotted = [f"{path}.{k}" if path else k for k in unknown]
        raise ConfigError(f"unknown config key(s): {', '.join(dotted)}")


def _build_dataclass(cls, obj: Any, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name for f in fields(cls)}
    _check_unknown(obj, names, path)
    return cls(**{k: v for k, v in obj.items()})


def _build_synth(obj: Any, path: str) -> SynthConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in fields(SynthConfig)}
    _check_unknown(obj, names, path)
    kwargs = dict(obj)
    groups = []
    for i, g in enumerate(kwargs.pop("groups", [])):
        gpath = f"{path}.groups[{i}]"
        if not isinstance(g, dict):
            raise ConfigError(f"{gpath}: expected an object")
        _check_unknown(g, {"task_ids", "overlap"}, gpath)
        if "task_ids" not in g or "overlap" not in g:
            raise ConfigError(f"{gpath}: needs task_ids and overlap")
        groups.append(
            SimilarityGroup(task_ids=tuple(int(t) for t in g["task_ids"]),
                            overlap=float(g["overlap"]))
        )
    return SynthConfig(groups=tuple(groups), **kwargs)


@dataclass
class ExperimentConfig:
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    strategies: tuple[str, ...] = STRATEGIES
    protocol: str = "cyclic"
    mc_runs: int = 10
    embedder: str = "concept"
    partition: str = "designed"
    test_fraction: float = 0.25
    workers: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transe: TransEConfig = field(default_factory=TransEConfig)
    concept: ConceptConfig = field(default_factory=ConceptConfig)
    out_dir: str | None = None

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds: {self.seeds}")
        if not self.strategies:
            raise ConfigError("strategies must not be empty")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError(f"duplicate strategies: {self.strategies}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.embedder not in EMBEDDERS:
            raise ConfigError(f"unknown embedder {self.embedder!r}; expected one of {EMBEDDERS}")
        if self.partition not in PARTITIONS:
            raise ConfigError(
                f"unknown partition {self.partition!r}; expected one of {PARTITIONS}"
            )
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.mc_runs < 1:
            raise ConfigError(f"mc_runs must be >= 1, got {self.mc_runs}")
        self.synth.validate()
        self.train.validate()
        self.transe.validate()
        self.concept.validate()

    @classmethod
    def from_dict(cls, obj: Any) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be an object")
        names = {f.name for f in fields(cls)}
        _check_unknown(obj, names, "")
        kwargs: dict[str, Any] = {}
        for key, value in obj.items():
            if key == "synth":
                kwargs[key] = _build_synth(value, "synth")
            elif key == "train":
                kwargs[key] = _build_dataclass(TrainConfig, value, "train")
            elif key == "transe":
                kwargs[key] = _build_dataclass(TransEConfig, value, "transe")
            elif key == "concept":
                kwargs[key] = _build_dataclass(ConceptConfig, value, "concept")
            elif key in ("seeds",):
                kwargs[key] = tuple(int(v) for v in value)
            elif key in ("strategies",):
                kwargs[key] = tuple(str(v) for v in value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc}") from exc
        return cls.from_dict(obj)

    def apply_overrides(
        self,
        seed: int | None = None,
        strategy: str | None = None,
        workers: int | None = None,
        out: str | None = None,
    ) -> "ExperimentConfig":
        """Flag-level overrides: --seed pins both the data seed and the run
        seed list, --strategy narrows the study to one strategy."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, data_seed=int(seed), seeds=(int(seed),))
        if strategy is not None:
            cfg = replace(cfg, strategies=(strategy,))
        if workers is not None:
            cfg = replace(cfg, workers=int(workers))
        if out is not None:
            cfg = replace(cfg, out_dir=str(out))
        cfg.validate()
        return cfg

    def snapshot(self) -> dict:
        """Config as plain data for embedding in reports; the output
        directory is normalized to null so report bytes do not depend on
        where the study ran."""
        snap = asdict(self)
        snap["out_dir"] = None
        return snap
