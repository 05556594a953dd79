import json

import pytest

# A study small enough to run end to end in a couple of seconds.
TINY_CONFIG = {
    "data_seed": 5,
    "seeds": [0, 1],
    "strategies": ["replay", "vanilla"],
    "protocol": "cyclic",
    "embedder": "concept",
    "partition": "designed",
    "test_fraction": 0.25,
    "workers": 1,
    "synth": {
        "num_tasks": 2,
        "relations_per_task": 2,
        "train_per_relation": 8,
        "test_per_relation": 4,
        "sentence_len": 4,
        "private_tokens": 3,
        "shared_tokens": 4,
        "private_concepts": 2,
        "shared_concepts": 2,
        "entities_per_concept": 2,
        "triples_per_relation": 6,
        "groups": [{"task_ids": [0, 1], "overlap": 0.5}],
    },
    "train": {
        "hidden_dim": 8,
        "epochs": 1,
        "batch_size": 8,
        "memory_per_task": 4,
        "curriculum_k": 2,
        "curriculum_n": 2,
    },
    "concept": {"concept_dim": 6, "relation_dim": 6, "epochs": 10, "batch_size": 8},
    "transe": {"dim": 6, "epochs": 5, "batch_size": 8},
}


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    return path
