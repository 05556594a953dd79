import json

import numpy as np
import pytest

from cml_lab.datasets import (
    Instance,
    MemoryBuffer,
    RunOrder,
    SimilarityGroup,
    SynthConfig,
    build_benchmark,
    generate_synthetic,
    kmeans,
    load_jsonl,
    load_partition,
    memory_select,
    partition_kmeans,
    partition_random,
    save_jsonl,
    save_partition,
    split_train_test,
)
from cml_lab.errors import (
    ConfigError,
    DegenerateInputError,
    ParseError,
    SchemaError,
    UnknownIdError,
)
from cml_lab.numerics import Rng


def make_instances(relation: str, n: int, prefix: str = "") -> list[Instance]:
    return [
        Instance(id=f"{prefix}{relation}-{i}", tokens=("a", "b"), relation=relation)
        for i in range(n)
    ]


class TestJsonlIo:
    def test_round_trip(self, tmp_path):
        xs = make_instances("r1", 3) + make_instances("r2", 2)
        path = tmp_path / "data.jsonl"
        save_jsonl(path, xs)
        assert load_jsonl(path) == xs

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "a", "tokens": ["x"], "relation": "r"}\n{oops\n')
        with pytest.raises(ParseError, match="2"):
            load_jsonl(p)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "a", "tokens": ["x"]}\n')
        with pytest.raises(SchemaError, match="relation"):
            load_jsonl(p)

    def test_empty_tokens_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "a", "tokens": [], "relation": "r"}\n')
        with pytest.raises(SchemaError):
            load_jsonl(p)

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        row = '{"id": "a", "tokens": ["x"], "relation": "r"}\n'
        p.write_text(row + row)
        with pytest.raises(SchemaError, match="duplicate"):
            load_jsonl(p)


class TestSplit:
    def test_stratified_and_disjoint(self):
        xs = make_instances("r1", 10) + make_instances("r2", 20)
        train, test = split_train_test(xs, 0.3, Rng(1, 0))
        assert len(train) + len(test) == 30
        assert {x.id for x in train}.isdisjoint({x.id for x in test})
        assert sum(x.relation == "r1" for x in test) == 3
        assert sum(x.relation == "r2" for x in test) == 6

    def test_every_relation_keeps_a_train_instance(self):
        xs = make_instances("solo", 1)
        train, test = split_train_test(xs, 0.9, Rng(2, 0))
        assert len(train) == 1 and not test

    def test_deterministic(self):
        xs = make_instances("r1", 9) + make_instances("r2", 7)
        a = split_train_test(xs, 0.25, Rng(5, 3))
        b = split_train_test(xs, 0.25, Rng(5, 3))
        assert a == b

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_train_test(make_instances("r", 4), 1.0, Rng(0, 0))


class TestBuildBenchmark:
    def test_assembles_tasks_and_vocab(self):
        train = make_instances("r1", 2) + make_instances("r2", 2)
        test = make_instances("r1", 1, prefix="t-")
        bm = build_benchmark(train, test, [["r1"], ["r2"]])
        assert bm.num_tasks() == 2
        assert bm.relations() == ["r1", "r2"]
        assert len(bm.tasks[0].train["r1"]) == 2
        assert bm.tasks[1].test["r2"] == []
        # vocabulary covers sentence tokens and relation-name tokens
        for tok in ("a", "b", "r1", "r2"):
            assert tok in bm.vocabulary

    def test_relation_in_two_tasks_rejected(self):
        train = make_instances("r1", 2)
        with pytest.raises(SchemaError):
            build_benchmark(train, [], [["r1"], ["r1"]])

    def test_unpartitioned_relation_rejected(self):
        with pytest.raises(UnknownIdError):
            build_benchmark(make_instances("r9", 2), [], [["r1"]])

    def test_relation_without_train_rejected(self):
        with pytest.raises(SchemaError, match="r2"):
            build_benchmark(make_instances("r1", 2), [], [["r1", "r2"]])


class TestPartitions:
    def test_random_partition_covers_all(self):
        rels = [f"r{i}" for i in range(11)]
        parts = partition_random(rels, 3, Rng(7, 0))
        assert sorted(r for p in parts for r in p) == sorted(rels)
        assert sorted(len(p) for p in parts) == [3, 4, 4]

    def test_random_partition_deterministic(self):
        rels = [f"r{i}" for i in range(8)]
        assert partition_random(rels, 3, Rng(3, 1)) == partition_random(rels, 3, Rng(3, 1))

    def test_random_partition_errors(self):
        with pytest.raises(ConfigError):
            partition_random(["a", "b"], 3, Rng(0, 0))
        with pytest.raises(SchemaError):
            partition_random(["a", "a"], 1, Rng(0, 0))

    def test_kmeans_partition_groups_nearby_vectors(self):
        vecs = {
            "a1": [0.0, 0.1], "a2": [0.1, 0.0],
            "b1": [5.0, 5.1], "b2": [5.1, 5.0],
            "c1": [-5.0, 5.0], "c2": [-5.1, 5.1],
        }
        parts = partition_kmeans(vecs, 3, Rng(11, 0))
        as_sets = sorted(frozenset(p) for p in parts)
        assert sorted(map(sorted, as_sets)) == [["a1", "a2"], ["b1", "b2"], ["c1", "c2"]]
        # canonical ordering: tasks sorted by smallest member
        assert [p[0] for p in parts] == ["a1", "b1", "c1"]

    def test_partition_file_round_trip(self, tmp_path):
        parts = [["r1", "r2"], ["r3"]]
        path = tmp_path / "partition.json"
        save_partition(path, parts)
        obj = json.loads(path.read_text())
        assert obj["tasks"][1] == {"task_id": 1, "relations": ["r3"]}
        assert load_partition(path) == parts

    def test_partition_file_rejects_duplicates(self, tmp_path):
        path = tmp_path / "partition.json"
        path.write_text(json.dumps({"tasks": [
            {"task_id": 0, "relations": ["r1"]},
            {"task_id": 1, "relations": ["r1"]},
        ]}))
        with pytest.raises(SchemaError):
            load_partition(path)

    def test_partition_file_rejects_bad_task_ids(self, tmp_path):
        path = tmp_path / "partition.json"
        path.write_text(json.dumps({"tasks": [{"task_id": 1, "relations": ["r1"]}]}))
        with pytest.raises(SchemaError):
            load_partition(path)


class TestKmeans:
    def test_recovers_separated_clusters(self):
        gen = Rng(21, 0).generator
        pts = np.concatenate([
            gen.normal(0.0, 0.1, (20, 2)),
            gen.normal(8.0, 0.1, (20, 2)),
        ])
        _, labels = kmeans(pts, 2, Rng(22, 0))
        assert len(set(labels[:20])) == 1
        assert len(set(labels[20:])) == 1
        assert labels[0] != labels[20]

    def test_deterministic(self):
        gen = Rng(23, 0).generator
        pts = gen.normal(size=(30, 3))
        c1, l1 = kmeans(pts, 4, Rng(24, 0))
        c2, l2 = kmeans(pts, 4, Rng(24, 0))
        assert np.array_equal(c1, c2) and np.array_equal(l1, l2)

    def test_too_few_distinct_points(self):
        pts = np.ones((5, 2))
        with pytest.raises(DegenerateInputError):
            kmeans(pts, 2, Rng(0, 0))

    def test_k_bounds(self):
        with pytest.raises(ConfigError):
            kmeans(np.zeros((3, 2)), 4, Rng(0, 0))


class TestMemory:
    def test_buffer_sorted_iteration(self):
        buf = MemoryBuffer()
        buf.add("z", make_instances("z", 2))
        buf.add("a", make_instances("a", 1))
        assert buf.relations() == ["a", "z"]
        assert len(buf) == 3
        assert [x.relation for x in buf.instances()] == ["a", "z", "z"]
        with pytest.raises(UnknownIdError):
            buf.instances_for("missing")

    def test_select_returns_all_when_under_budget(self):
        xs = make_instances("r", 3)
        emb = np.arange(6.0).reshape(3, 2)
        assert memory_select(xs, emb, 5, Rng(1, 0)) == xs

    def test_select_picks_one_prototype_per_cluster(self):
        xs = make_instances("r", 6)
        emb = np.array([[0.0], [0.1], [0.2], [9.0], [9.1], [9.2]])
        chosen = memory_select(xs, emb, 2, Rng(2, 0))
        ids = {x.id for x in chosen}
        assert ids == {"r-1", "r-4"}  # cluster means 0.1 and 9.1

    def test_select_fallback_on_duplicate_embeddings(self):
        xs = make_instances("r", 5)
        emb = np.zeros((5, 2))
        assert memory_select(xs, emb, 3, Rng(3, 0)) == xs[:3]

    def test_embedding_count_mismatch(self):
        with pytest.raises(SchemaError):
            memory_select(make_instances("r", 3), np.zeros((2, 2)), 2, Rng(0, 0))


class TestRunOrder:
    def test_valid(self):
        ro = RunOrder(order=(2, 0, 1), offset=4)
        assert ro.offset == 4

    def test_invalid_permutation(self):
        with pytest.raises(ConfigError):
            RunOrder(order=(0, 2), offset=0)


class TestSynthetic:
    CFG = SynthConfig(
        num_tasks=4,
        relations_per_task=2,
        train_per_relation=12,
        test_per_relation=5,
        sentence_len=6,
        triples_per_relation=15,
        groups=(SimilarityGroup(task_ids=(0, 1), overlap=0.8),),
    )

    def test_counts_and_partition(self):
        data = generate_synthetic(self.CFG, Rng(31, 0))
        bm = data.benchmark
        assert bm.num_tasks() == 4
        assert len(data.relation_order) == 8
        for task in bm.tasks:
            for r in task.relations:
                assert len(task.train[r]) == 12
                assert len(task.test[r]) == 5
        assert len(data.triples) == 8 * 15

    def test_deterministic(self):
        a = generate_synthetic(self.CFG, Rng(32, 5))
        b = generate_synthetic(self.CFG, Rng(32, 5))
        assert a.benchmark.tasks[2].train == b.benchmark.tasks[2].train
        assert a.triples == b.triples

    def test_designed_similarity_structure(self):
        data = generate_synthetic(self.CFG, Rng(33, 0))
        sim = data.designed_similarity
        idx = {r: i for i, r in enumerate(data.relation_order)}
        in_group = [r for t in (0, 1) for r in data.partition[t]]
        outside = [r for t in (2, 3) for r in data.partition[t]]
        assert np.allclose(np.diag(sim), 1.0)
        assert np.allclose(sim, sim.T)
        for r1 in in_group:
            for r2 in in_group:
                if r1 != r2:
                    assert sim[idx[r1], idx[r2]] == pytest.approx(0.8)
            for r2 in outside:
                assert sim[idx[r1], idx[r2]] == 0.0
        for r1 in outside:
            for r2 in outside:
                if r1 != r2:
                    assert sim[idx[r1], idx[r2]] == 0.0

    def test_token_sharing_matches_design(self):
        data = generate_synthetic(self.CFG, Rng(34, 0))
        bm = data.benchmark

        def task_tokens(t: int) -> set[str]:
            return {tok for x in bm.tasks[t].train_instances() for tok in x.tokens}

        assert task_tokens(0) & task_tokens(1)  # grouped tasks share tokens
        assert not task_tokens(2) & task_tokens(3)
        assert not task_tokens(0) & task_tokens(2)

    def test_shared_token_rate_near_overlap(self):
        data = generate_synthetic(self.CFG, Rng(35, 0))
        xs = data.benchmark.tasks[0].train_instances()
        toks = [tok for x in xs for tok in x.tokens]
        shared = sum(t.startswith("tok00s") for t in toks)
        assert shared / len(toks) == pytest.approx(0.8, abs=0.08)

    def test_triples_reference_known_entities(self):
        data = generate_synthetic(self.CFG, Rng(36, 0))
        entities = {e for e, _ in data.entity_concepts}
        rels = set(data.relation_order)
        for h, r, t in data.triples:
            assert h in entities and t in entities and r in rels

    def test_group_validation(self):
        bad = SynthConfig(num_tasks=2, groups=(SimilarityGroup((0, 5), 0.5),))
        with pytest.raises(ConfigError):
            generate_synthetic(bad, Rng(0, 0))
        twice = SynthConfig(
            num_tasks=3,
            groups=(SimilarityGroup((0, 1), 0.5), SimilarityGroup((1, 2), 0.5)),
        )
        with pytest.raises(ConfigError):
            generate_synthetic(twice, Rng(0, 0))
