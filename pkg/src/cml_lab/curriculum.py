"""Relation difficulty scores and curriculum construction.

Similarity between two relations is the mean pairwise cosine between their
embedding sets (a set may be a single knowledge-graph vector or many
instance embeddings). A relation's difficulty is its mean similarity to
every other relation in scope: relations that resemble many others are the
confusable, hard ones. A curriculum is a per-relation sample drawn from
episodic memory and ordered easiest first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .datasets import Instance, MemoryBuffer
from .errors import DegenerateInputError, DimensionError, UnknownIdError
from .numerics import Rng, as_matrix, check_finite


def _as_rows(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DimensionError(f"{name}: expected (d,) or (m, d), got shape {arr.shape}")
    check_finite(name, arr)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{name}: zero-norm embedding row")
    return arr / norms


def pairwise_set_similarity(a, b) -> float:
    """Mean cosine over all cross pairs of two embedding sets."""
    ra = _as_rows(a, "a")
    rb = _as_rows(b, "b")
    if ra.shape[1] != rb.shape[1]:
        raise DimensionError(f"embedding dims differ: {ra.shape[1]} vs {rb.shape[1]}")
    return float((ra @ rb.T).mean())


def relation_similarity_matrix(
    vectors: Mapping[str, np.ndarray], order: Sequence[str]
) -> np.ndarray:
    """Similarity of every relation pair in ``order``, diagonal included."""
    if len(set(order)) != len(order):
        raise DimensionError("relation order contains duplicates")
    missing = [r for r in order if r not in vectors]
    if missing:
        raise UnknownIdError(f"relations without embeddings: {missing[:5]}")
    rows = [_as_rows(vectors[r], r) for r in order]
    k = len(order)
    sim = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            sim[i, j] = sim[j, i] = float((rows[i] @ rows[j].T).mean())
    return sim


def relation_difficulty(sim: np.ndarray) -> np.ndarray:
    """Mean off-diagonal similarity per relation."""
    s = as_matrix(sim, "similarity")
    k = s.shape[0]
    if s.shape[1] != k:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    if k < 2:
        raise DegenerateInputError("difficulty needs at least 2 relations")
    return (s.sum(axis=1) - np.diag(s)) / (k - 1)


def task_difficulty(
    sim: np.ndarray, relation_order: Sequence[str], partition: Sequence[Sequence[str]]
) -> np.ndarray:
    """Per-task mean of its relations' difficulties."""
    diff = relation_difficulty(sim)
    index = {r: i for i, r in enumerate(relation_order)}
    out = np.empty(len(partition))
    for t, rels in enumerate(partition):
        missing = [r for r in rels if r not in index]
        if missing:
            raise UnknownIdError(f"task {t} relations not in order: {missing[:5]}")
        out[t] = float(np.mean([diff[index[r]] for r in rels]))
    return out


def relation_difficulty_wrt(
    vectors: Mapping[str, np.ndarray], relation: str, others: Sequence[str]
) -> float:
    """Mean similarity of ``relation`` to the given reference relations."""
    if relation not in vectors:
        raise UnknownIdError(f"no embedding for relation {relation!r}")
    refs = [r for r in others if r != relation]
    if not refs:
        raise DegenerateInputError(f"no reference relations besides {relation!r}")
    missing = [r for r in refs if r not in vectors]
    if missing:
        raise UnknownIdError(f"relations without embeddings: {missing[:5]}")
    return float(
        np.mean([pairwise_set_similarity(vectors[relation], vectors[r]) for r in refs])
    )


@dataclass(frozen=True)
class CurriculumStep:
    relation: str
    instances: tuple[Instance, ...]
    difficulty: float


@dataclass(frozen=True)
class Curriculum:
    steps: tuple[CurriculumStep, ...]

    def __len__(self) -> int:
        return len(self.steps)


def build_curriculum(
    memory: MemoryBuffer,
    vectors: Mapping[str, np.ndarray] | None,
    current_relations: Sequence[str],
    k: int,
    n: int,
    rng: Rng,
    sort: bool = True,
) -> Curriculum:
    """Sample k memory relations with n instances each, easiest first.

    Difficulty of a sampled relation is its mean similarity to the current
    task's relations; steps are ordered by ascending difficulty (ties by
    relation name). With ``sort=False`` the sampled order is kept and no
    embeddings are needed. Memories smaller than k relations or n instances
    are used whole.
    """
    available = memory.relations()
    if not available:
        return Curriculum(steps=())
    if sort and vectors is None:
        raise DegenerateInputError("sorted curriculum needs relation embeddings")
    gen = rng.generator
    if len(available) > k:
        picked = [available[i] for i in gen.choice(len(available), size=k, replace=False)]
    else:
        picked = [available[i] for i in gen.permutation(len(available))]
    steps = []
    for rel in picked:
        pool = memory.instances_for(rel)
        if len(pool) > n:
            chosen = [pool[i] for i in sorted(gen.choice(len(pool), size=n, replace=False))]
        else:
            chosen = pool
        diff = (
            relation_difficulty_wrt(vectors, rel, current_relations)
            if sort
            else 0.0
        )
        steps.append(CurriculumStep(relation=rel, instances=tuple(chosen), difficulty=diff))
    if sort:
        steps.sort(key=lambda s: (s.difficulty, s.relation))
    return Curriculum(steps=tuple(steps))
