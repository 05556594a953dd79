"""Continual relation extractor and its training strategies.

The extractor embeds tokens, mean-pools them, and encodes sentences and
relation names with one shared two-layer tanh MLP; a sentence's logit for a
relation is the cosine between the two encodings times a fixed temperature.

Strategies over a task sequence:

* ``vanilla``: plain sequential fine-tuning on each task.
* ``replay``: keeps an episodic memory of prototypes and trains every epoch
  on the union of the current task and memory.
* ``meta_noncurriculum``: per-relation inner adaptation combined by an
  interpolated (reptile-style) outer update, memory relations join the
  inner loop, memory samples replay in unsorted order, and a final
  fine-tune pass runs on memory.
* ``cml``: same as ``meta_noncurriculum`` but each inner adaptation first
  works through a curriculum of memory relations ordered easiest first by
  embedding similarity to the current task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .curriculum import build_curriculum
from .datasets import Benchmark, Instance, MemoryBuffer, RunOrder, Task, memory_select
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    ParseError,
    SchemaError,
    UnknownIdError,
)
from .numerics import Mlp2, Param, Rng, adam_step, softmax

STRATEGIES = ("cml", "meta_noncurriculum", "replay", "vanilla")


@dataclass
class TrainConfig:
    hidden_dim: int = 200
    lr: float = 2e-3
    epochs: int = 3
    batch_size: int = 50
    epsilon: float = 0.4
    curriculum_k: int = 4
    curriculum_n: int = 5
    memory_per_task: int = 50
    finetune_epochs: int = 1
    temperature: float = 10.0

    def validate(self) -> None:
        ints = [
            ("hidden_dim", self.hidden_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("curriculum_k", self.curriculum_k),
            ("curriculum_n", self.curriculum_n),
            ("memory_per_task", self.memory_per_task),
        ]
        for name, v in ints:
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in (0, 1], got {self.epsilon}")


class ExtractorModel:
    """Token embeddings plus a shared sentence/name encoder."""

    def __init__(
        self,
        vocabulary: Mapping[str, int],
        relation_names: Mapping[str, tuple[str, ...]],
        cfg: TrainConfig,
        rng: Rng,
    ):
        cfg.validate()
        self.vocab = dict(vocabulary)
        self.relation_names = {r: tuple(n) for r, n in relation_names.items()}
        self.temperature = cfg.temperature
        h = cfg.hidden_dim
        gen = rng.child(0).generator
        self.emb = Param.create(
            "extractor.emb", gen.normal(0.0, 1.0, (len(self.vocab), h))
        )
        self.mlp = Mlp2.create("extractor.mlp", h, h, h, rng.child(1))

    def params(self) -> list[Param]:
        return [self.emb] + self.mlp.params()

    def get_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def set_values(self, values: Sequence[np.ndarray]) -> None:
        """Overwrite parameter values; optimizer state restarts from zero."""
        params = self.params()
        if len(values) != len(params):
            raise DimensionError(f"expected {len(params)} tensors, got {len(values)}")
        for p, v in zip(params, values):
            if v.shape != p.value.shape:
                raise DimensionError(f"{p.name}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v
            p.adam_m.fill(0.0)
            p.adam_v.fill(0.0)
            p.step_count = 0
            p.zero_grad()

    def _token_rows(self, token_seqs: Sequence[tuple[str, ...]]):
        idx_lists = []
        for toks in token_seqs:
            try:
                idx_lists.append(np.array([self.vocab[t] for t in toks], dtype=int))
            except KeyError as exc:
                raise UnknownIdError(f"token not in vocabulary: {exc.args[0]!r}") from exc
        pooled = np.stack([self.emb.value[ix].mean(axis=0) for ix in idx_lists])
        return pooled, idx_lists

    def _name_tokens(self, relation: str) -> tuple[str, ...]:
        if relation not in self.relation_names:
            raise UnknownIdError(f"relation without a name: {relation!r}")
        return self.relation_names[relation]

    def _scatter_pool_grad(self, idx_lists, grad_rows: np.ndarray) -> None:
        lengths = np.array([len(ix) for ix in idx_lists], dtype=np.float64)
        rows = np.repeat(grad_rows / lengths[:, None], [len(ix) for ix in idx_lists], axis=0)
        np.add.at(self.emb.grad, np.concatenate(idx_lists), rows)

    def _encode_with_names(self, instances: Sequence[Instance], candidates: Sequence[str]):
        sent_pool, sent_idx = self._token_rows([x.tokens for x in instances])
        name_pool, name_idx = self._token_rows([self._name_tokens(r) for r in candidates])
        h = self.mlp.forward(np.concatenate([sent_pool, name_pool]))
        b = len(instances)
        return h[:b], h[b:], sent_idx, name_idx

    @staticmethod
    def _cosine_logits(s: np.ndarray, r: np.ndarray, tau: float):
        ns = np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-12)
        nr = np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
        sn = s / ns
        rn = r / nr
        cos = sn @ rn.T
        return tau * cos, cos, sn, rn, ns, nr

    def encode_sentences(self, instances: Sequence[Instance]) -> np.ndarray:
        if not instances:
            raise DegenerateInputError("no instances to encode")
        pooled, _ = self._token_rows([x.tokens for x in instances])
        return self.mlp.forward(pooled)

    def loss_and_grad(self, instances: Sequence[Instance], candidates: Sequence[str]) -> float:
        """Mean cross-entropy over the batch; accumulates into param grads."""
        if not instances:
            raise DegenerateInputError("empty batch")
        cand = list(candidates)
        if len(set(cand)) != len(cand):
            raise SchemaError("duplicate candidate relations")
        pos = {r: i for i, r in enumerate(cand)}
        try:
            targets = np.array([pos[x.relation] for x in instances], dtype=int)
        except KeyError as exc:
            raise UnknownIdError(f"instance relation not in candidates: {exc.args[0]!r}") from exc

        s, r, sent_idx, name_idx = self._encode_with_names(instances, cand)
        logits, cos, sn, rn, ns, nr = self._cosine_logits(s, r, self.temperature)
        probs = softmax(logits)
        b = len(instances)
        loss = float(-np.log(probs[np.arange(b), targets] + 1e-300).mean())

        g = probs.copy()
        g[np.arange(b), targets] -= 1.0
        g *= self.temperature / b
        ds = (g @ rn - (g * cos).sum(axis=1, keepdims=True) * sn) / ns
        dr = (g.T @ sn - (g.T * cos.T).sum(axis=1, keepdims=True) * rn) / nr
        d_pool = self.mlp.backward(np.concatenate([ds, dr]))
        self._scatter_pool_grad(sent_idx + name_idx, d_pool)
        return loss

    def predict(self, instances: Sequence[Instance], candidates: Sequence[str]) -> list[str]:
        if not candidates:
            raise ConfigError("no candidate relations")
        if not instances:
            return []
        s, r, _, _ = self._encode_with_names(instances, list(candidates))
        logits, *_ = self._cosine_logits(s, r, self.temperature)
        return [candidates[i] for i in logits.argmax(axis=1)]


def reptile_aggregate(
    model: ExtractorModel,
    base: Sequence[np.ndarray],
    adapted: Sequence[Sequence[np.ndarray]],
    epsilon: float,
) -> None:
    """Move base weights toward the mean of the adapted weights.

    new = base + epsilon/N * sum_i (adapted_i - base).
    """
    if not adapted:
        raise DegenerateInputError("no adapted parameter sets")
    scale = epsilon / len(adapted)
    new = []
    for k, b in enumerate(base):
        delta = sum(a[k] - b for a in adapted)
        new.append(b + scale * delta)
    model.set_values(new)


def _batches(instances: Sequence[Instance], batch_size: int, gen) -> list[list[Instance]]:
    order = gen.permutation(len(instances))
    return [
        [instances[i] for i in order[s : s + batch_size]]
        for s in range(0, len(instances), batch_size)
    ]


def _train_batches(
    model: ExtractorModel,
    instances: Sequence[Instance],
    base_candidates: Sequence[str],
    cfg: TrainConfig,
    gen,
) -> None:
    for batch in _batches(instances, cfg.batch_size, gen):
        cand = sorted(set(base_candidates) | {x.relation for x in batch})
        model.loss_and_grad(batch, cand)
        adam_step(model.params(), cfg.lr)


def inner_adapt_relation(
    model: ExtractorModel,
    relation: str,
    instances: Sequence[Instance],
    task_relations: Sequence[str],
    memory: MemoryBuffer,
    vectors: Mapping[str, np.ndarray] | None,
    cfg: TrainConfig,
    rng: Rng,
    sort_curriculum: bool,
) -> list[np.ndarray]:
    """One inner-loop adaptation: curriculum replay, then the relation's data.

    Mutates the model in place and returns the adapted parameter values;
    the caller is responsible for restoring the base weights.
    """
    if len(memory):
        cur = build_curriculum(
            memory,
            vectors,
            task_relations,
            cfg.curriculum_k,
            cfg.curriculum_n,
            rng.child(0),
            sort=sort_curriculum,
        )
        for si, step in enumerate(cur.steps):
            _train_batches(
                model, list(step.instances), task_relations, cfg, rng.child(10 + si).generator
            )
    _train_batches(model, instances, task_relations, cfg, rng.child(1).generator)
    return model.get_values()


def train_task(
    model: ExtractorModel,
    task: Task,
    memory: MemoryBuffer,
    strategy: str,
    cfg: TrainConfig,
    vectors: Mapping[str, np.ndarray] | None,
    rng: Rng,
) -> None:
    """Train the model on one task under the given strategy, then refresh
    memory with prototypes of the task's relations."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    cfg.validate()
    meta = strategy in ("cml", "meta_noncurriculum")

    for epoch in range(cfg.epochs):
        ep_rng = rng.child(epoch)
        if meta:
            units: list[tuple[str, list[Instance]]] = [
                (r, task.train[r]) for r in task.relations
            ]
            units += [(r, memory.instances_for(r)) for r in memory.relations()]
            base = model.get_values()
            adapted = []
            for ui, (rel, insts) in enumerate(units):
                model.set_values(base)
                adapted.append(
                    inner_adapt_relation(
                        model,
                        rel,
                        insts,
                        task.relations,
                        memory,
                        vectors,
                        cfg,
                        ep_rng.child(ui),
                        sort_curriculum=(strategy == "cml"),
                    )
                )
            model.set_values(base)
            reptile_aggregate(model, base, adapted, cfg.epsilon)
        else:
            pool = task.train_instances()
            if strategy == "replay":
                pool = pool + memory.instances()
            _train_batches(model, pool, task.relations, cfg, ep_rng.generator)

    if strategy != "vanilla":
        budget = max(1, cfg.memory_per_task // len(task.relations))
        for ri, rel in enumerate(task.relations):
            emb = model.encode_sentences(task.train[rel])
            memory.add(rel, memory_select(task.train[rel], emb, budget, rng.child(1000 + ri)))
        if meta and cfg.finetune_epochs > 0 and len(memory):
            mem_rels = memory.relations()
            for fe in range(cfg.finetune_epochs):
                _train_batches(
                    model, memory.instances(), mem_rels, cfg, rng.child(2000 + fe).generator
                )


@dataclass
class StepLog:
    step: int
    trained_task: int
    per_task_acc: dict[str, float]
    acc_a: float
    acc_w: float


@dataclass
class RunRecord:
    strategy: str
    order: tuple[int, ...]
    offset: int
    steps: list[StepLog] = field(default_factory=list)

    def final(self) -> StepLog:
        if not self.steps:
            raise DegenerateInputError("run record has no steps")
        return self.steps[-1]

    def final_acc_for_task(self, task_id: int) -> float:
        accs = self.final().per_task_acc
        key = str(task_id)
        if key not in accs:
            raise UnknownIdError(f"task {task_id} missing from final accuracies")
        return accs[key]


def evaluate_seen(
    model: ExtractorModel, benchmark: Benchmark, seen_task_ids: Sequence[int]
) -> tuple[dict[str, float], float, float]:
    """Accuracy per seen task plus its macro (acc_a) and micro (acc_w) means.

    Candidates are all relations of all seen tasks.
    """
    cand = sorted({r for t in seen_task_ids for r in benchmark.tasks[t].relations})
    per_task: dict[str, float] = {}
    correct_total = 0
    count_total = 0
    for t in sorted(seen_task_ids):
        insts = benchmark.tasks[t].test_instances()
        if not insts:
            raise DegenerateInputError(f"task {t} has no test instances")
        preds = model.predict(insts, cand)
        correct = sum(p == x.relation for p, x in zip(preds, insts))
        per_task[str(t)] = correct / len(insts)
        correct_total += correct
        count_total += len(insts)
    acc_a = float(np.mean(list(per_task.values())))
    acc_w = correct_total / count_total
    return per_task, acc_a, acc_w


def train_sequence(
    benchmark: Benchmark,
    run: RunOrder,
    strategy: str,
    cfg: TrainConfig,
    vectors: Mapping[str, np.ndarray] | None,
    rng: Rng,
) -> RunRecord:
    """Train through the tasks in the run's order, evaluating after each."""
    if len(run.order) != benchmark.num_tasks():
        raise ConfigError(
            f"run order covers {len(run.order)} tasks, benchmark has {benchmark.num_tasks()}"
        )
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    model = ExtractorModel(benchmark.vocabulary, benchmark.relation_names, cfg, rng.child(0))
    memory = MemoryBuffer()
    record = RunRecord(strategy=strategy, order=run.order, offset=run.offset)
    seen: list[int] = []
    for step, task_id in enumerate(run.order, start=1):
        train_task(
            model, benchmark.tasks[task_id], memory, strategy, cfg, vectors, rng.child(step)
        )
        seen.append(task_id)
        per_task, acc_a, acc_w = evaluate_seen(model, benchmark, seen)
        record.steps.append(
            StepLog(
                step=step,
                trained_task=task_id,
                per_task_acc=per_task,
                acc_a=acc_a,
                acc_w=acc_w,
            )
        )
    return record


_STEP_KEYS = {"step", "trained_task", "per_task_acc", "acc_a", "acc_w"}


def save_steps_jsonl(path, steps: Sequence[StepLog]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in steps:
            fh.write(
                json.dumps(
                    {
                        "step": s.step,
                        "trained_task": s.trained_task,
                        "per_task_acc": s.per_task_acc,
                        "acc_a": s.acc_a,
                        "acc_w": s.acc_w,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_steps_jsonl(path) -> list[StepLog]:
    out: list[StepLog] = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{ln}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != _STEP_KEYS:
                raise SchemaError(f"{path}:{ln}: expected keys {sorted(_STEP_KEYS)}")
            if not isinstance(obj["per_task_acc"], dict):
                raise SchemaError(f"{path}:{ln}: per_task_acc must be an object")
            out.append(
                StepLog(
                    step=int(obj["step"]),
                    trained_task=int(obj["trained_task"]),
                    per_task_acc={str(k): float(v) for k, v in obj["per_task_acc"].items()},
                    acc_a=float(obj["acc_a"]),
                    acc_w=float(obj["acc_w"]),
                )
            )
    if [s.step for s in out] != list(range(1, len(out) + 1)):
        raise SchemaError(f"{path}: steps must be consecutive from 1")
    return out
