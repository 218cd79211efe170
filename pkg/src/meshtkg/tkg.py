"""Temporal knowledge graph data model and ICEWS-format ingestion.

A dataset directory holds five UTF-8 text files:

    train.txt / valid.txt / test.txt   one fact per line, `s<TAB>r<TAB>o<TAB>t`
                                       (extra trailing columns are ignored)
    entity2id.txt / relation2id.txt    `name<TAB>id`, ids dense from 0

Raw timestamps (day indices or hours since epoch, depending on the
distribution) are normalized over the union of all splits: divided by the
smallest positive gap, shifted to start at 0, and re-indexed to dense
integers 0..T-1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

from . import rng


class DatasetError(Exception):
    """Base class for dataset loading and validation failures."""


class LoadError(DatasetError):
    """A required file is missing or unreadable."""


class ParseError(DatasetError):
    """A file has malformed content; message carries file and line."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class Quadruple(NamedTuple):
    s: int
    r: int
    o: int
    t: int


@dataclass(frozen=True)
class Vocabulary:
    entity_names: list[str]
    relation_names: list[str]
    num_timestamps: int
    time_granularity: str = "unknown"

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)


@dataclass
class TemporalKG:
    """Facts grouped into per-timestamp snapshots.

    ``snapshots[k]`` holds exactly the quadruples with t = k; timestamps
    with no facts in this split hold an empty list. The list is trimmed
    at the split's last populated timestamp.
    """

    snapshots: list[list[Quadruple]] = field(default_factory=list)
    split: str = "merged"

    @property
    def num_facts(self) -> int:
        return sum(len(snap) for snap in self.snapshots)

    def facts(self) -> Iterator[Quadruple]:
        for snap in self.snapshots:
            yield from snap

    def timestamps(self) -> list[int]:
        """Timestamps that actually carry facts, ascending."""
        return [t for t, snap in enumerate(self.snapshots) if snap]


def _group_snapshots(facts, split: str) -> TemporalKG:
    if not facts:
        return TemporalKG([], split)
    snapshots: list[list[Quadruple]] = [[] for _ in range(max(q.t for q in facts) + 1)]
    for q in facts:
        snapshots[q.t].append(q)
    return TemporalKG(snapshots, split)


def _read_id_file(path: str) -> list[str]:
    if not os.path.isfile(path):
        raise LoadError(f"missing vocabulary file: {path}")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(path, lineno, f"expected `name<TAB>id`, got {line!r}")
            try:
                idx = int(parts[-1])
            except ValueError:
                raise ParseError(path, lineno, f"id is not an integer: {parts[-1]!r}")
            pairs.append((idx, parts[0]))
    names = [""] * len(pairs)
    seen = set()
    for idx, name in pairs:
        if idx < 0 or idx >= len(pairs) or idx in seen:
            raise LoadError(f"{path}: ids are not dense integers 0..{len(pairs) - 1}")
        seen.add(idx)
        names[idx] = name
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise LoadError(f"{path}: duplicate names {dupes[:5]}")
    return names


def _read_fact_file(path: str, num_entities: int, num_relations: int):
    if not os.path.isfile(path):
        raise LoadError(f"missing split file: {path}")
    rows = []
    prev_t = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise ParseError(path, lineno, f"expected 4 tab-separated fields, got {len(parts)}")
            try:
                s, r, o, t = (int(parts[i]) for i in range(4))
            except ValueError:
                raise ParseError(path, lineno, f"non-integer field in {parts[:4]!r}")
            if s < 0 or s >= num_entities:
                raise ParseError(path, lineno, f"subject id {s} outside 0..{num_entities - 1}")
            if o < 0 or o >= num_entities:
                raise ParseError(path, lineno, f"object id {o} outside 0..{num_entities - 1}")
            if r < 0 or r >= num_relations:
                raise ParseError(path, lineno, f"relation id {r} outside 0..{num_relations - 1}")
            if t < 0:
                raise ParseError(path, lineno, f"negative timestamp {t}")
            if prev_t is not None and t < prev_t:
                raise ParseError(path, lineno, f"timestamp {t} decreases after {prev_t}")
            prev_t = t
            rows.append((s, r, o, t))
    return rows


def _normalize_timestamps(split_rows: dict[str, list]) -> tuple[dict[str, list[Quadruple]], int]:
    """Map raw timestamps to dense 0..T-1 over the union of all splits."""
    raw = sorted({t for rows in split_rows.values() for (_, _, _, t) in rows})
    if not raw:
        return {name: [] for name in split_rows}, 0
    gaps = [b - a for a, b in zip(raw, raw[1:]) if b > a]
    step = min(gaps) if gaps else 1
    scaled = sorted({(t - raw[0]) // step for t in raw})
    dense = {v: i for i, v in enumerate(scaled)}
    out = {
        name: [Quadruple(s, r, o, dense[(t - raw[0]) // step]) for (s, r, o, t) in rows]
        for name, rows in split_rows.items()
    }
    return out, len(scaled)


def load_dataset(directory: str, time_granularity: str = "unknown"):
    """Load a dataset directory.

    Returns (vocabulary, train, valid, test); timestamps are shared dense
    indices across the three splits.
    """
    entity_names = _read_id_file(os.path.join(directory, "entity2id.txt"))
    relation_names = _read_id_file(os.path.join(directory, "relation2id.txt"))
    raw = {
        split: _read_fact_file(
            os.path.join(directory, f"{split}.txt"), len(entity_names), len(relation_names)
        )
        for split in ("train", "valid", "test")
    }
    normalized, num_timestamps = _normalize_timestamps(raw)
    vocab = Vocabulary(entity_names, relation_names, num_timestamps, time_granularity)
    train = _group_snapshots(normalized["train"], "train")
    valid = _group_snapshots(normalized["valid"], "valid")
    test = _group_snapshots(normalized["test"], "test")
    return vocab, train, valid, test


def write_dataset(directory: str, vocab: Vocabulary, train, valid, test) -> None:
    """Write a normalized dataset back to the text format."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "entity2id.txt"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(vocab.entity_names):
            fh.write(f"{name}\t{i}\n")
    with open(os.path.join(directory, "relation2id.txt"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(vocab.relation_names):
            fh.write(f"{name}\t{i}\n")
    for tkg in (train, valid, test):
        with open(os.path.join(directory, f"{tkg.split}.txt"), "w", encoding="utf-8") as fh:
            for q in tkg.facts():
                fh.write(f"{q.s}\t{q.r}\t{q.o}\t{q.t}\n")


def merge(*tkgs: TemporalKG) -> TemporalKG:
    """Union of several splits as one graph (snapshot-aligned)."""
    length = max((len(t.snapshots) for t in tkgs), default=0)
    snapshots: list[list[Quadruple]] = [[] for _ in range(length)]
    for tkg in tkgs:
        for t, snap in enumerate(tkg.snapshots):
            snapshots[t].extend(snap)
    while snapshots and not snapshots[-1]:
        snapshots.pop()
    return TemporalKG(snapshots, "merged")


def add_inverse_relations(tkg: TemporalKG, vocab: Vocabulary):
    """Append the mirror (o, r+|R|, s, t) of every fact to its snapshot.

    The relation vocabulary doubles, with mirrored names suffixed
    "_inverse". Calling this on an already-augmented graph is an error.
    """
    num_rel = vocab.num_relations
    names = vocab.relation_names
    half = num_rel // 2
    if num_rel and num_rel % 2 == 0 and all(
        names[half + i] == names[i] + "_inverse" for i in range(half)
    ):
        raise ValueError("relation vocabulary is already inverse-augmented; cannot augment twice")
    for q in tkg.facts():
        if q.r >= num_rel:
            raise ValueError("graph already contains inverse relation ids; cannot augment twice")
    snapshots = []
    for snap in tkg.snapshots:
        mirrored = [Quadruple(q.o, q.r + num_rel, q.s, q.t) for q in snap]
        snapshots.append(snap + mirrored)
    new_vocab = replace(
        vocab,
        relation_names=vocab.relation_names + [n + "_inverse" for n in vocab.relation_names],
    )
    return TemporalKG(snapshots, tkg.split), new_vocab


def truncate_and_resplit(vocab: Vocabulary, train, valid, test, max_timestamps: int,
                         train_frac: float = 0.8, valid_frac: float = 0.1):
    """Keep only the first `max_timestamps` snapshots of the merged dataset
    and re-split temporally (default 80/10/10); for capped desk-scale runs.
    """
    if max_timestamps < 3:
        raise ValueError("need at least 3 timestamps to form three splits")
    merged = merge(train, valid, test)
    snapshots = merged.snapshots[:max_timestamps]
    total = len(snapshots)
    train_end = max(1, int(total * train_frac))
    valid_end = max(train_end + 1, int(total * (train_frac + valid_frac)))
    valid_end = min(valid_end, total - 1)

    def slice_split(start, stop, split):
        padded = [[] for _ in range(start)] + [list(s) for s in snapshots[start:stop]]
        while padded and not padded[-1]:
            padded.pop()
        return TemporalKG(padded, split)

    new_vocab = replace(vocab, num_timestamps=total)
    return (
        new_vocab,
        slice_split(0, train_end, "train"),
        slice_split(train_end, valid_end, "valid"),
        slice_split(valid_end, total, "test"),
    )


def drop_history_fraction(tkg: TemporalKG, fraction: float, seed: int) -> TemporalKG:
    """Remove floor(fraction * |F|) facts uniformly at random (seeded)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    total = tkg.num_facts
    n_drop = int(fraction * total)
    if n_drop == 0:
        return TemporalKG([list(snap) for snap in tkg.snapshots], tkg.split)
    gen = rng.stream(seed, rng.DROP_HISTORY)
    dropped = set(gen.choice(total, size=n_drop, replace=False).tolist())
    snapshots = []
    pos = 0
    for snap in tkg.snapshots:
        kept = [q for i, q in enumerate(snap, start=pos) if i not in dropped]
        pos += len(snap)
        snapshots.append(kept)
    return TemporalKG(snapshots, tkg.split)
