"""Benchmark construction: instances, tasks, partitions, memory, synthesis.

A benchmark is an ordered list of tasks, each owning a disjoint set of
relations with per-relation train/test instances. Relations are assigned to
tasks either randomly, by clustering relation vectors, or by the synthetic
generator's designed layout. Also hosts the episodic memory used by
replay-style training strategies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    ParseError,
    SchemaError,
    UnknownIdError,
)
from .numerics import Rng, as_matrix


@dataclass(frozen=True)
class Instance:
    """One labelled sentence: token sequence plus its relation id."""

    id: str
    tokens: tuple[str, ...]
    relation: str


@dataclass
class Task:
    task_id: int
    relations: list[str]
    train: dict[str, list[Instance]]
    test: dict[str, list[Instance]]

    def train_instances(self) -> list[Instance]:
        return [x for r in self.relations for x in self.train[r]]

    def test_instances(self) -> list[Instance]:
        return [x for r in self.relations for x in self.test[r]]


@dataclass
class Benchmark:
    """Tasks plus the token vocabulary shared by sentences and names."""

    tasks: list[Task]
    relation_names: dict[str, tuple[str, ...]]
    vocabulary: dict[str, int]

    def relations(self) -> list[str]:
        return [r for t in self.tasks for r in t.relations]

    def num_tasks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class RunOrder:
    """One training run: a task permutation plus its run identifier.

    ``offset`` doubles as the run's random-stream id so repeated runs of the
    same study are reproducible and mutually independent.
    """

    order: tuple[int, ...]
    offset: int

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ConfigError(f"not a permutation of 0..{len(self.order) - 1}: {self.order}")


class MemoryBuffer:
    """Per-relation episodic memory; iteration order is always sorted."""

    def __init__(self):
        self.store: dict[str, list[Instance]] = {}

    def add(self, relation: str, instances: Iterable[Instance]) -> None:
        self.store.setdefault(relation, []).extend(instances)

    def relations(self) -> list[str]:
        return sorted(self.store)

    def instances(self) -> list[Instance]:
        return [x for r in self.relations() for x in self.store[r]]

    def instances_for(self, relation: str) -> list[Instance]:
        if relation not in self.store:
            raise UnknownIdError(f"relation not in memory: {relation}")
        return list(self.store[relation])

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())


def default_relation_name_tokens(relation: str) -> tuple[str, ...]:
    """A relation's name is its id as a single vocabulary token."""
    return (relation,)


def load_jsonl(path) -> list[Instance]:
    """Read instances from JSON lines: {"id","tokens","relation"} per line."""
    out: list[Instance] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{ln}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{ln}: expected an object")
            missing = {"id", "tokens", "relation"} - obj.keys()
            if missing:
                raise SchemaError(f"{path}:{ln}: missing keys {sorted(missing)}")
            iid, tokens, rel = obj["id"], obj["tokens"], obj["relation"]
            if (
                not isinstance(iid, str)
                or not isinstance(rel, str)
                or not isinstance(tokens, list)
                or not tokens
                or not all(isinstance(t, str) and t for t in tokens)
            ):
                raise SchemaError(f"{path}:{ln}: bad field types")
            if iid in seen:
                raise SchemaError(f"{path}:{ln}: duplicate instance id {iid!r}")
            seen.add(iid)
            out.append(Instance(id=iid, tokens=tuple(tokens), relation=rel))
    return out


def save_jsonl(path, instances: Sequence[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in instances:
            fh.write(
                json.dumps(
                    {"id": x.id, "tokens": list(x.tokens), "relation": x.relation},
                    sort_keys=True,
                )
                + "\n"
            )


def split_train_test(
    instances: Sequence[Instance], test_fraction: float, rng: Rng
) -> tuple[list[Instance], list[Instance]]:
    """Stratified split: within each relation, a shuffled tail goes to test.

    Every relation keeps at least one training instance; relations with a
    single instance contribute nothing to test.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    by_rel: dict[str, list[Instance]] = {}
    for x in instances:
        by_rel.setdefault(x.relation, []).append(x)
    train: list[Instance] = []
    test: list[Instance] = []
    for i, rel in enumerate(sorted(by_rel)):
        group = by_rel[rel]
        perm = rng.child(i).generator.permutation(len(group))
        n_test = min(int(len(group) * test_fraction), len(group) - 1)
        test_idx = set(perm[:n_test].tolist())
        for j, x in enumerate(group):
            (test if j in test_idx else train).append(x)
    return train, test


def build_vocabulary(
    instances: Iterable[Instance], relation_names: Mapping[str, tuple[str, ...]]
) -> dict[str, int]:
    tokens: set[str] = set()
    for x in instances:
        tokens.update(x.tokens)
    for name in relation_names.values():
        tokens.update(name)
    return {t: i for i, t in enumerate(sorted(tokens))}


def build_benchmark(
    train: Sequence[Instance],
    test: Sequence[Instance],
    partition: Sequence[Sequence[str]],
    relation_names: Mapping[str, tuple[str, ...]] | None = None,
) -> Benchmark:
    """Assemble tasks from split instances and a relation partition.

    Every instance's relation must appear in the partition, and every
    partitioned relation needs at least one training instance.
    """
    rel_task: dict[str, int] = {}
    for t, rels in enumerate(partition):
        for r in rels:
            if r in rel_task:
                raise SchemaError(f"relation {r!r} appears in more than one task")
            rel_task[r] = t
    for x in list(train) + list(test):
        if x.relation not in rel_task:
            raise UnknownIdError(f"instance {x.id!r} has unpartitioned relation {x.relation!r}")
    names = dict(relation_names) if relation_names is not None else {
        r: default_relation_name_tokens(r) for r in rel_task
    }
    missing_names = set(rel_task) - set(names)
    if missing_names:
        raise SchemaError(f"relations without names: {sorted(missing_names)}")

    tasks = []
    for t, rels in enumerate(partition):
        tr = {r: [x for x in train if x.relation == r] for r in rels}
        te = {r: [x for x in test if x.relation == r] for r in rels}
        for r in rels:
            if not tr[r]:
                raise SchemaError(f"relation {r!r} has no training instances")
        tasks.append(Task(task_id=t, relations=list(rels), train=tr, test=te))
    vocab = build_vocabulary(list(train) + list(test), names)
    return Benchmark(tasks=tasks, relation_names=names, vocabulary=vocab)


def partition_random(relations: Sequence[str], num_tasks: int, rng: Rng) -> list[list[str]]:
    """Shuffle relations and cut into near-equal contiguous chunks."""
    rels = sorted(set(relations))
    if len(rels) != len(relations):
        raise SchemaError("duplicate relations in partition input")
    if not 1 <= num_tasks <= len(rels):
        raise ConfigError(f"num_tasks must be in [1, {len(rels)}], got {num_tasks}")
    order = [rels[i] for i in rng.generator.permutation(len(rels))]
    base, extra = divmod(len(rels), num_tasks)
    out, pos = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        out.append(order[pos : pos + size])
        pos += size
    return out


def kmeans(
    points: np.ndarray, k: int, rng: Rng, restarts: int = 10, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean k-means with k-means++ seeding and multiple restarts.

    Returns (centroids, labels) of the restart with the lowest inertia.
    Ties in point assignment go to the lowest cluster index; an emptied
    cluster is reseeded to the point currently farthest from its centroid.
    """
    pts = as_matrix(points, "points")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    if np.unique(pts, axis=0).shape[0] < k:
        raise DegenerateInputError(f"fewer than {k} distinct points")

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for r in range(restarts):
        gen = rng.child(r).generator
        centroids = np.empty((k, pts.shape[1]))
        centroids[0] = pts[gen.integers(n)]
        for j in range(1, k):
            d2 = ((pts[:, None, :] - centroids[None, :j, :]) ** 2).sum(-1).min(axis=1)
            total = d2.sum()
            probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
            centroids[j] = pts[gen.choice(n, p=probs)]
        labels = np.zeros(n, dtype=int)
        for _ in range(max_iter):
            d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
            labels = d2.argmin(axis=1)
            new = centroids.copy()
            for j in range(k):
                members = labels == j
                if members.any():
                    new[j] = pts[members].mean(axis=0)
                else:
                    new[j] = pts[d2[np.arange(n), labels].argmax()]
            if np.allclose(new, centroids, atol=1e-12):
                centroids = new
                break
            centroids = new
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        if best is None or inertia < best[0]:
            best = (inertia, centroids, labels)
    assert best is not None
    return best[1], best[2]


def partition_kmeans(
    relation_vectors: Mapping[str, np.ndarray], num_tasks: int, rng: Rng
) -> list[list[str]]:
    """Cluster relation vectors into tasks; cluster = task.

    Tasks are ordered by their lexicographically smallest member so the
    result is independent of cluster label numbering.
    """
    rels = sorted(relation_vectors)
    if not 1 <= num_tasks <= len(rels):
        raise ConfigError(f"num_tasks must be in [1, {len(rels)}], got {num_tasks}")
    mat = as_matrix(np.stack([np.asarray(relation_vectors[r], dtype=np.float64) for r in rels]))
    _, labels = kmeans(mat, num_tasks, rng)
    clusters: dict[int, list[str]] = {}
    for r, lab in zip(rels, labels):
        clusters.setdefault(int(lab), []).append(r)
    return sorted(clusters.values(), key=lambda c: c[0])


def save_partition(path, partition: Sequence[Sequence[str]]) -> None:
    obj = {
        "tasks": [
            {"task_id": t, "relations": list(rels)} for t, rels in enumerate(partition)
        ]
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_partition(path) -> list[list[str]]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("tasks"), list) or not obj["tasks"]:
        raise SchemaError(f"{path}: expected object with non-empty 'tasks' list")
    seen: set[str] = set()
    out: list[list[str]] = []
    for i, entry in enumerate(obj["tasks"]):
        if not isinstance(entry, dict) or entry.get("task_id") != i:
            raise SchemaError(f"{path}: tasks[{i}] must have task_id {i}")
        rels = entry.get("relations")
        if not isinstance(rels, list) or not rels or not all(isinstance(r, str) for r in rels):
            raise SchemaError(f"{path}: tasks[{i}] needs a non-empty relation list")
        dup = seen.intersection(rels)
        if dup or len(set(rels)) != len(rels):
            raise SchemaError(f"{path}: relations assigned twice: {sorted(dup) or rels}")
        seen.update(rels)
        out.append(list(rels))
    return out


def memory_select(
    instances: Sequence[Instance], embeddings: np.ndarray, budget: int, rng: Rng
) -> list[Instance]:
    """Prototype selection: keep the instance nearest each k-means centroid.

    Falls back to the first ``budget`` instances when there are not enough
    distinct embeddings to support clustering.
    """
    if budget < 1:
        raise ConfigError(f"memory budget must be >= 1, got {budget}")
    emb = as_matrix(embeddings, "embeddings")
    if emb.shape[0] != len(instances):
        raise SchemaError(f"{len(instances)} instances but {emb.shape[0]} embeddings")
    if len(instances) <= budget:
        return list(instances)
    if np.unique(emb, axis=0).shape[0] < budget:
        return list(instances[:budget])
    centroids, labels = kmeans(emb, budget, rng)
    chosen = []
    for j in range(budget):
        members = np.flatnonzero(labels == j)
        d2 = ((emb[members] - centroids[j]) ** 2).sum(axis=1)
        chosen.append(int(members[int(d2.argmin())]))
    return [instances[i] for i in sorted(set(chosen))]


@dataclass(frozen=True)
class SimilarityGroup:
    """Tasks whose relations draw a fraction ``overlap`` of their token and
    concept mass from a pool shared across the whole group."""

    task_ids: tuple[int, ...]
    overlap: float


@dataclass
class SynthConfig:
    num_tasks: int = 5
    relations_per_task: int = 4
    train_per_relation: int = 50
    test_per_relation: int = 20
    sentence_len: int = 8
    private_tokens: int = 6
    shared_tokens: int = 10
    private_concepts: int = 3
    shared_concepts: int = 6
    entities_per_concept: int = 3
    triples_per_relation: int = 40
    groups: tuple[SimilarityGroup, ...] = ()

    def validate(self) -> None:
        positive = [
            ("num_tasks", self.num_tasks),
            ("relations_per_task", self.relations_per_task),
            ("train_per_relation", self.train_per_relation),
            ("test_per_relation", self.test_per_relation),
            ("sentence_len", self.sentence_len),
            ("private_tokens", self.private_tokens),
            ("shared_tokens", self.shared_tokens),
            ("private_concepts", self.private_concepts),
            ("shared_concepts", self.shared_concepts),
            ("entities_per_concept", self.entities_per_concept),
            ("triples_per_relation", self.triples_per_relation),
        ]
        for name, v in positive:
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        claimed: set[int] = set()
        for g in self.groups:
            if not 0.0 <= g.overlap < 1.0:
                raise ConfigError(f"group overlap must be in [0, 1), got {g.overlap}")
            for t in g.task_ids:
                if not 0 <= t < self.num_tasks:
                    raise ConfigError(f"group task id {t} out of range")
                if t in claimed:
                    raise ConfigError(f"task {t} assigned to more than one group")
                claimed.add(t)


@dataclass
class SyntheticData:
    benchmark: Benchmark
    partition: list[list[str]]
    triples: list[tuple[str, str, str]]
    entity_concepts: list[tuple[str, str]]
    relation_order: list[str]
    designed_similarity: np.ndarray


def generate_synthetic(cfg: SynthConfig, rng: Rng) -> SyntheticData:
    """Build a benchmark with controllable cross-task relatedness.

    Each relation owns private token and concept pools; tasks inside a
    similarity group additionally draw a fraction ``overlap`` of every
    sentence token and triple argument from the group's shared pools. Ground
    truth relatedness between two relations is therefore the overlap of
    their groups' shared mass: ``overlap`` within a group, 0 across groups,
    1 on the diagonal.
    """
    cfg.validate()
    task_group: dict[int, SimilarityGroup] = {}
    for g in cfg.groups:
        for t in g.task_ids:
            task_group[t] = g

    group_tokens: dict[int, list[str]] = {}
    group_concepts: dict[int, list[str]] = {}
    for gi, g in enumerate(cfg.groups):
        group_tokens[gi] = [f"tok{gi:02d}s{j:03d}" for j in range(cfg.shared_tokens)]
        group_concepts[gi] = [f"con{gi:02d}s{j:03d}" for j in range(cfg.shared_concepts)]
    group_index = {id(g): gi for gi, g in enumerate(cfg.groups)}

    partition: list[list[str]] = []
    rel_tokens: dict[str, list[str]] = {}
    rel_concepts: dict[str, list[str]] = {}
    rel_overlap: dict[str, float] = {}
    rel_shared_tokens: dict[str, list[str]] = {}
    rel_shared_concepts: dict[str, list[str]] = {}
    rel_group: dict[str, int] = {}
    for t in range(cfg.num_tasks):
        rels = []
        for i in range(cfg.relations_per_task):
            r = f"rel-t{t}-{i}"
            rels.append(r)
            rel_tokens[r] = [f"tok-{r}-{j:03d}" for j in range(cfg.private_tokens)]
            rel_concepts[r] = [f"con-{r}-{j:03d}" for j in range(cfg.private_concepts)]
            if t in task_group:
                g = task_group[t]
                gi = group_index[id(g)]
                rel_overlap[r] = g.overlap
                rel_shared_tokens[r] = group_tokens[gi]
                rel_shared_concepts[r] = group_concepts[gi]
                rel_group[r] = gi
            else:
                rel_overlap[r] = 0.0
                rel_shared_tokens[r] = []
                rel_shared_concepts[r] = []
                rel_group[r] = -1
        partition.append(rels)
    relation_order = [r for rels in partition for r in rels]

    # Entities: one disjoint set per concept.
    all_concepts = sorted(
        {c for cs in rel_concepts.values() for c in cs}
        | {c for cs in group_concepts.values() for c in cs}
    )
    entity_concepts: list[tuple[str, str]] = []
    concept_entities: dict[str, list[str]] = {}
    for c in all_concepts:
        ents = [f"ent-{c}-{j}" for j in range(cfg.entities_per_concept)]
        concept_entities[c] = ents
        entity_concepts.extend((e, c) for e in ents)

    def draw_from(gen, omega: float, shared: list[str], private: list[str]) -> str:
        if shared and gen.uniform() < omega:
            return shared[gen.integers(len(shared))]
        return private[gen.integers(len(private))]

    train: list[Instance] = []
    test: list[Instance] = []
    triples: list[tuple[str, str, str]] = []
    for ri, r in enumerate(relation_order):
        gen = rng.child(ri).generator
        omega = rel_overlap[r]
        for split, count, bucket in (
            ("train", cfg.train_per_relation, train),
            ("test", cfg.test_per_relation, test),
        ):
            for j in range(count):
                toks = tuple(
                    draw_from(gen, omega, rel_shared_tokens[r], rel_tokens[r])
                    for _ in range(cfg.sentence_len)
                )
                bucket.append(Instance(id=f"{r}-{split}-{j:03d}", tokens=toks, relation=r))
        for _ in range(cfg.triples_per_relation):
            hc = draw_from(gen, omega, rel_shared_concepts[r], rel_concepts[r])
            tc = draw_from(gen, omega, rel_shared_concepts[r], rel_concepts[r])
            h = concept_entities[hc][gen.integers(len(concept_entities[hc]))]
            t = concept_entities[tc][gen.integers(len(concept_entities[tc]))]
            triples.append((h, r, t))

    n = len(relation_order)
    designed = np.zeros((n, n))
    for i, r1 in enumerate(relation_order):
        for j, r2 in enumerate(relation_order):
            if i == j:
                designed[i, j] = 1.0
            elif rel_group[r1] >= 0 and rel_group[r1] == rel_group[r2]:
                designed[i, j] = rel_overlap[r1]
    benchmark = build_benchmark(train, test, partition)
    return SyntheticData(
        benchmark=benchmark,
        partition=partition,
        triples=triples,
        entity_concepts=entity_concepts,
        relation_order=relation_order,
        designed_similarity=designed,
    )
