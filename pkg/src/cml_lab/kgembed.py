"""Relation embeddings learned from a knowledge graph.

Two embedders over (head, relation, tail) triples:

* TransE: translation embeddings trained with a margin ranking loss against
  corrupted triples; the score of a triple is the L2 residual norm, so true
  triples score lower than corrupted ones.
* ConceptModel: embeds each relation so that it predicts the concept
  distribution of its argument entities; the per-triple objective is
  -log P(concept(head) | r) - log P(concept(tail) | r) with
  P(c | r) = softmax over concepts of MLP(concept_emb[c]) . rel_emb[r].

Relation vectors from either model feed curriculum similarity and k-means
task partitioning, and round-trip through a small text format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, SchemaError, UnknownIdError
from .numerics import (
    Mlp2,
    Param,
    Rng,
    adam_step,
    softmax_ce_grad,
    softmax_ce_loss,
)

Triple = tuple[str, str, str]


@dataclass
class KnowledgeGraph:
    triples: list[Triple]
    entity_concepts: dict[str, str]
    entities: list[str] = field(init=False)
    relations: list[str] = field(init=False)
    concepts: list[str] = field(init=False)

    def __post_init__(self):
        if not self.triples:
            raise SchemaError("knowledge graph has no triples")
        ents = {h for h, _, _ in self.triples} | {t for _, _, t in self.triples}
        missing = sorted(e for e in ents if e not in self.entity_concepts)
        if missing:
            raise UnknownIdError(f"entities without a concept: {missing[:5]}")
        self.entities = sorted(ents)
        self.relations = sorted({r for _, r, _ in self.triples})
        self.concepts = sorted({self.entity_concepts[e] for e in self.entities})


def load_triples_tsv(path) -> list[Triple]:
    out: list[Triple] = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(f"{path}:{ln}: expected 3 tab-separated fields")
            out.append((parts[0], parts[1], parts[2]))
    return out


def save_triples_tsv(path, triples: Sequence[Triple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def load_concepts_tsv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(parts):
                raise ParseError(f"{path}:{ln}: expected 2 tab-separated fields")
            ent, con = parts
            if ent in out and out[ent] != con:
                raise SchemaError(f"{path}:{ln}: entity {ent!r} mapped to two concepts")
            out[ent] = con
    return out


def save_concepts_tsv(path, entity_concepts: Mapping[str, str] | Sequence[tuple[str, str]]) -> None:
    pairs = (
        sorted(entity_concepts.items())
        if isinstance(entity_concepts, Mapping)
        else list(entity_concepts)
    )
    with open(path, "w", encoding="utf-8") as fh:
        for ent, con in pairs:
            fh.write(f"{ent}\t{con}\n")


@dataclass
class TransEConfig:
    dim: int = 200
    lr: float = 1e-3
    margin: float = 1.0
    epochs: int = 100
    batch_size: int = 128

    def validate(self) -> None:
        if self.dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("dim, epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.margin <= 0:
            raise ConfigError("lr and margin must be positive")


class TransEModel:
    def __init__(self, kg: KnowledgeGraph, dim: int, rng: Rng):
        self.entity_index = {e: i for i, e in enumerate(kg.entities)}
        self.relation_index = {r: i for i, r in enumerate(kg.relations)}
        bound = 6.0 / math.sqrt(dim)
        gen = rng.generator
        ent = gen.uniform(-bound, bound, (len(kg.entities), dim))
        ent /= np.linalg.norm(ent, axis=1, keepdims=True)
        self.ent = Param.create("transe.ent", ent)
        self.rel = Param.create(
            "transe.rel", gen.uniform(-bound, bound, (len(kg.relations), dim))
        )

    def params(self) -> list[Param]:
        return [self.ent, self.rel]

    def normalize_entities(self) -> None:
        norms = np.linalg.norm(self.ent.value, axis=1, keepdims=True)
        np.maximum(norms, 1e-12, out=norms)
        self.ent.value /= norms

    def score_indexed(self, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
        u = self.ent.value[h] + self.rel.value[r] - self.ent.value[t]
        return np.linalg.norm(u, axis=1)

    def score(self, head: str, relation: str, tail: str) -> float:
        """Residual norm |e_h + e_r - e_t|; lower means more plausible."""
        try:
            h = self.entity_index[head]
            t = self.entity_index[tail]
            r = self.relation_index[relation]
        except KeyError as exc:
            raise UnknownIdError(f"unknown id in triple: {exc.args[0]!r}") from exc
        return float(self.score_indexed(np.array([h]), np.array([r]), np.array([t]))[0])

    def relation_vectors(self) -> dict[str, np.ndarray]:
        return {r: self.rel.value[i].copy() for r, i in self.relation_index.items()}


def transe_loss_and_grad(
    model: TransEModel,
    pos: tuple[np.ndarray, np.ndarray, np.ndarray],
    neg: tuple[np.ndarray, np.ndarray, np.ndarray],
    margin: float,
) -> float:
    """Mean margin ranking loss over a batch; accumulates into param grads."""
    (ph, pr, pt), (nh, nr, nt) = pos, neg
    b = ph.shape[0]
    u_pos = model.ent.value[ph] + model.rel.value[pr] - model.ent.value[pt]
    u_neg = model.ent.value[nh] + model.rel.value[nr] - model.ent.value[nt]
    d_pos = np.linalg.norm(u_pos, axis=1)
    d_neg = np.linalg.norm(u_neg, axis=1)
    viol = margin + d_pos - d_neg
    active = viol > 0
    loss = float(np.maximum(viol, 0.0).mean())
    if active.any():
        safe_pos = np.maximum(d_pos, 1e-12)
        safe_neg = np.maximum(d_neg, 1e-12)
        g_pos = (active / safe_pos)[:, None] * u_pos / b
        g_neg = -(active / safe_neg)[:, None] * u_neg / b
        np.add.at(model.ent.grad, ph, g_pos)
        np.add.at(model.ent.grad, pt, -g_pos)
        np.add.at(model.rel.grad, pr, g_pos)
        np.add.at(model.ent.grad, nh, g_neg)
        np.add.at(model.ent.grad, nt, -g_neg)
        np.add.at(model.rel.grad, nr, g_neg)
    return loss


def train_transe(
    kg: KnowledgeGraph, cfg: TransEConfig, rng: Rng
) -> tuple[TransEModel, list[float]]:
    """Margin-ranking training with one corrupted triple per positive.

    Either the head or the tail of each positive is replaced by a uniformly
    random entity. Entity rows are renormalized after every update. Returns
    the model and the mean loss per epoch.
    """
    cfg.validate()
    model = TransEModel(kg, cfg.dim, rng.child(0))
    h_all = np.array([model.entity_index[h] for h, _, _ in kg.triples])
    r_all = np.array([model.relation_index[r] for _, r, _ in kg.triples])
    t_all = np.array([model.entity_index[t] for _, _, t in kg.triples])
    n = len(kg.triples)
    n_ent = len(kg.entities)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        gen = rng.child(epoch + 1).generator
        order = gen.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            ph, pr, pt = h_all[idx], r_all[idx], t_all[idx]
            corrupt_head = gen.uniform(size=idx.shape[0]) < 0.5
            random_ent = gen.integers(n_ent, size=idx.shape[0])
            nh = np.where(corrupt_head, random_ent, ph)
            nt = np.where(corrupt_head, pt, random_ent)
            losses.append(transe_loss_and_grad(model, (ph, pr, pt), (nh, pr, nt), cfg.margin))
            adam_step(model.params(), cfg.lr)
            model.normalize_entities()
        trace.append(float(np.mean(losses)))
    return model, trace


@dataclass
class ConceptConfig:
    concept_dim: int = 50
    relation_dim: int = 50
    lr: float = 5e-4
    epochs: int = 100
    batch_size: int = 64

    def validate(self) -> None:
        if min(self.concept_dim, self.relation_dim, self.epochs, self.batch_size) < 1:
            raise ConfigError("dims, epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


class ConceptModel:
    """Relation embeddings trained to predict argument concepts.

    All three tensors train jointly: the concept embedding table, the
    relation embedding table, and the MLP mapping concept space into
    relation space.
    """

    def __init__(self, kg: KnowledgeGraph, cfg: ConceptConfig, rng: Rng):
        self.concept_index = {c: i for i, c in enumerate(kg.concepts)}
        self.relation_index = {r: i for i, r in enumerate(kg.relations)}
        gen = rng.child(0).generator
        c_scale = 1.0 / math.sqrt(cfg.concept_dim)
        r_scale = 1.0 / math.sqrt(cfg.relation_dim)
        self.concept_emb = Param.create(
            "concept.emb", gen.normal(0.0, c_scale, (len(kg.concepts), cfg.concept_dim))
        )
        self.rel_emb = Param.create(
            "concept.rel", gen.normal(0.0, r_scale, (len(kg.relations), cfg.relation_dim))
        )
        self.mlp = Mlp2.create(
            "concept.mlp", cfg.concept_dim, cfg.concept_dim, cfg.relation_dim, rng.child(1)
        )

    def params(self) -> list[Param]:
        return [self.concept_emb, self.rel_emb] + self.mlp.params()

    def concept_logits(self, relation_row: int) -> np.ndarray:
        m = self.mlp.forward(self.concept_emb.value)
        return m @ self.rel_emb.value[relation_row]

    def concept_likelihood(self, concept: str, relation: str) -> float:
        """log P(concept | relation) under the softmax over all concepts."""
        if concept not in self.concept_index:
            raise UnknownIdError(f"unknown concept: {concept!r}")
        if relation not in self.relation_index:
            raise UnknownIdError(f"unknown relation: {relation!r}")
        logits = self.concept_logits(self.relation_index[relation])
        loss, _ = softmax_ce_loss(logits, self.concept_index[concept])
        return -loss

    def relation_vectors(self) -> dict[str, np.ndarray]:
        return {r: self.rel_emb.value[i].copy() for r, i in self.relation_index.items()}


def concept_loss_and_grad(
    model: ConceptModel,
    head_concepts: np.ndarray,
    relations: np.ndarray,
    tail_concepts: np.ndarray,
) -> float:
    """Mean over triples of head plus tail concept cross-entropy."""
    b = relations.shape[0]
    m = model.mlp.forward(model.concept_emb.value)
    dm = np.zeros_like(m)
    total = 0.0
    for hc, r, tc in zip(head_concepts, relations, tail_concepts):
        v = model.rel_emb.value[r]
        logits = m @ v
        dlogits = np.zeros(logits.shape[0])
        for target in (int(hc), int(tc)):
            loss, probs = softmax_ce_loss(logits, target)
            total += loss
            dlogits += softmax_ce_grad(probs, target)
        dlogits /= b
        dm += dlogits[:, None] * v[None, :]
        model.rel_emb.grad[r] += m.T @ dlogits
    model.concept_emb.grad += model.mlp.backward(dm)
    return total / b


def train_concept_model(
    kg: KnowledgeGraph, cfg: ConceptConfig, rng: Rng
) -> tuple[ConceptModel, list[float]]:
    cfg.validate()
    model = ConceptModel(kg, cfg, rng.child(0))
    hc = np.array([model.concept_index[kg.entity_concepts[h]] for h, _, _ in kg.triples])
    rr = np.array([model.relation_index[r] for _, r, _ in kg.triples])
    tc = np.array([model.concept_index[kg.entity_concepts[t]] for _, _, t in kg.triples])
    n = len(kg.triples)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        gen = rng.child(epoch + 1).generator
        order = gen.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses.append(concept_loss_and_grad(model, hc[idx], rr[idx], tc[idx]))
            adam_step(model.params(), cfg.lr)
        trace.append(float(np.mean(losses)))
    return model, trace


def save_relation_vectors(path, vectors: Mapping[str, np.ndarray]) -> None:
    """One line per relation: name, tab, space-separated components."""
    dims = {np.asarray(v).shape for v in vectors.values()}
    if len(dims) > 1 or any(len(s) != 1 for s in dims):
        raise DimensionError(f"relation vectors must share one 1-d shape, got {dims}")
    with open(path, "w", encoding="utf-8") as fh:
        for r in sorted(vectors):
            comps = " ".join(f"{x:.17g}" for x in np.asarray(vectors[r], dtype=np.float64))
            fh.write(f"{r}\t{comps}\n")


def load_relation_vectors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ParseError(f"{path}:{ln}: expected 'relation<TAB>components'")
            name, comps = parts
            if name in out:
                raise SchemaError(f"{path}:{ln}: duplicate relation {name!r}")
            try:
                vec = np.array([float(x) for x in comps.split()], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: bad float: {exc}") from exc
            if vec.size == 0 or not np.all(np.isfinite(vec)):
                raise ParseError(f"{path}:{ln}: empty or non-finite vector")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DimensionError(f"{path}:{ln}: dim {vec.size} != {dim}")
            out[name] = vec
    if not out:
        raise SchemaError(f"{path}: no relation vectors")
    return out
