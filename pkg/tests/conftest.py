import numpy as np
import pytest

from meshtkg.tkg import Quadruple, TemporalKG, Vocabulary, write_dataset


def make_vocab(num_entities, num_relations, num_timestamps=0):
    return Vocabulary(
        entity_names=[f"e{i}" for i in range(num_entities)],
        relation_names=[f"rel{i}" for i in range(num_relations)],
        num_timestamps=num_timestamps,
    )


def group(facts, split="train"):
    """Group quadruples into a TemporalKG (facts need not be sorted)."""
    facts = [Quadruple(*f) for f in facts]
    if not facts:
        return TemporalKG([], split)
    snapshots = [[] for _ in range(max(f.t for f in facts) + 1)]
    for f in facts:
        snapshots[f.t].append(f)
    return TemporalKG(snapshots, split)


def random_facts(gen, n, num_entities, num_relations, num_timestamps):
    return [
        Quadruple(
            int(gen.integers(num_entities)),
            int(gen.integers(num_relations)),
            int(gen.integers(num_entities)),
            int(gen.integers(num_timestamps)),
        )
        for _ in range(n)
    ]


@pytest.fixture
def tiny_dataset_dir(tmp_path):
    """A 5-entity, 2-relation dataset with temporally split facts on disk."""
    vocab = make_vocab(5, 2)
    train = group(
        [(0, 0, 1, 0), (1, 0, 2, 0), (0, 0, 1, 1), (2, 1, 3, 1), (3, 1, 4, 2), (0, 0, 1, 2)],
        "train",
    )
    valid = group([(0, 0, 1, 3), (4, 1, 0, 3)], "valid")
    test = group([(0, 0, 1, 4), (2, 1, 3, 4)], "test")
    path = tmp_path / "tiny"
    write_dataset(str(path), vocab, train, valid, test)
    return str(path)


@pytest.fixture(scope="session")
def np_gen():
    return np.random.default_rng(20240811)


def synth_repetitive_facts(seed=0, num_entities=30, num_relations=4, num_timestamps=20,
                           per_step=16, repeat_prob=0.9, num_subjects=12):
    """Event stream with learnable structure: each (subject, relation) pair
    mostly repeats one favorite object. Restricting the subject pool keeps
    per-pair occurrence counts high enough for quick micro training runs."""
    gen = np.random.default_rng(seed)
    fav = gen.integers(num_entities, size=(num_subjects, num_relations))
    facts = []
    for t in range(num_timestamps):
        for _ in range(per_step):
            s = int(gen.integers(num_subjects))
            r = int(gen.integers(num_relations))
            if gen.random() < repeat_prob:
                o = int(fav[s, r])
            else:
                o = int(gen.integers(num_entities))
            facts.append(Quadruple(s, r, o, t))
    return facts


def temporal_split(facts, train_hi, valid_hi):
    def sel(lo, hi, split):
        chosen = [f for f in facts if lo <= f.t < hi]
        return group(chosen, split)

    top = max(f.t for f in facts) + 1
    return sel(0, train_hi, "train"), sel(train_hi, valid_hi, "valid"), sel(valid_hi, top, "test")


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """A 20-timestamp repetitive synthetic dataset, on disk and in memory."""
    facts = synth_repetitive_facts(seed=3, num_timestamps=20)
    train, valid, test = temporal_split(facts, 14, 17)
    vocab = make_vocab(30, 4, 20)
    path = tmp_path_factory.mktemp("synth") / "ds"
    write_dataset(str(path), vocab, train, valid, test)
    return {"dir": str(path), "vocab": vocab, "train": train, "valid": valid, "test": test}


def micro_config(dataset_dir, out_dir, **overrides):
    from meshtkg.config import resolve

    values = dict(
        dataset=dataset_dir, out=out_dir, profile="desk", seed=1,
        dim=16, llm_dim=16, adapter_hidden=16, channels=3,
        epochs_stage0=25, epochs_stage1=8, learning_rate=0.01, dropout=0.1,
    )
    values.update(overrides)
    return resolve(values)


@pytest.fixture(scope="session")
def trained(synth_dataset, tmp_path_factory):
    """One shared micro training run (seconds) for downstream tests."""
    from meshtkg.encoders import synthetic_embeddings
    from meshtkg.training import train_model

    out = str(tmp_path_factory.mktemp("train"))
    config = micro_config(synth_dataset["dir"], out)
    sem = synthetic_embeddings(synth_dataset["vocab"], config.llm_dim, config.synthetic_seed)
    result = train_model(
        config, synth_dataset["vocab"], synth_dataset["train"], synth_dataset["valid"], sem
    )
    return {"config": config, "result": result, "sem": sem, **synth_dataset}
