"""In-memory hyper-relational knowledge graphs with numeric literals.

A fact is a primary triplet ``(head, relation, tail)`` plus an ordered list of
``(relation, value)`` qualifiers. Entities are either discrete (an index into
the entity vocabulary) or numeric (a unitless real value).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Union


@dataclass(frozen=True)
class Discrete:
    entity_id: int


@dataclass(frozen=True)
class Numeric:
    value: float


EntityRef = Union[Discrete, Numeric]


@dataclass(frozen=True)
class Qualifier:
    relation_id: int
    value: EntityRef


@dataclass(frozen=True)
class PrimaryTriplet:
    head: EntityRef
    relation_id: int
    tail: EntityRef


@dataclass(frozen=True)
class HyperFact:
    triplet: PrimaryTriplet
    qualifiers: tuple[Qualifier, ...] = ()

    @property
    def num_qualifiers(self) -> int:
        return len(self.qualifiers)

    def canonical(self) -> tuple:
        """Hashable key that ignores qualifier order."""
        return (self.triplet, tuple(sorted(self.qualifiers, key=_qualifier_sort_key)))


def _ref_sort_key(ref: EntityRef) -> tuple:
    if isinstance(ref, Discrete):
        return (0, ref.entity_id, 0.0)
    return (1, 0, ref.value)


def _qualifier_sort_key(q: Qualifier) -> tuple:
    return (q.relation_id, _ref_sort_key(q.value))


def make_fact(head, relation_id: int, tail, qualifiers: Iterable[tuple[int, EntityRef]] = ()) -> HyperFact:
    """Convenience constructor; bare ints become Discrete refs, floats become Numeric."""
    return HyperFact(
        PrimaryTriplet(_as_ref(head), relation_id, _as_ref(tail)),
        tuple(Qualifier(q, _as_ref(v)) for q, v in qualifiers),
    )


def _as_ref(x) -> EntityRef:
    if isinstance(x, (Discrete, Numeric)):
        return x
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return Discrete(int(x))
    if isinstance(x, float):
        return Numeric(x)
    raise TypeError(f"cannot interpret {x!r} as an entity reference")


class Bijection:
    """Name <-> id mapping with dense ids assigned in insertion order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        if name in self._ids:
            return self._ids[name]
        self._ids[name] = len(self._names)
        self._names.append(name)
        return self._ids[name]

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    def get(self, name: str) -> int | None:
        return self._ids.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Bijection) and self._names == other._names

    def __repr__(self) -> str:
        return f"Bijection({len(self)} names)"


@dataclass(frozen=True)
class RelationStats:
    min: float
    max: float
    count: int

    @property
    def constant(self) -> bool:
        return self.max == self.min


@dataclass
class Vocabulary:
    entities: Bijection = field(default_factory=Bijection)
    relations: Bijection = field(default_factory=Bijection)
    # relation ids that carry a numeric value somewhere (tail or qualifier value)
    numeric_relations: set[int] = field(default_factory=set)
    relation_stats: dict[int, RelationStats] = field(default_factory=dict)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def is_numeric(self, relation_id: int) -> bool:
        return relation_id in self.numeric_relations

    def observe(self, facts: Iterable[HyperFact]) -> None:
        """Record which relations carry numeric values."""
        for fact in facts:
            if isinstance(fact.triplet.tail, Numeric):
                self.numeric_relations.add(fact.triplet.relation_id)
            for q in fact.qualifiers:
                if isinstance(q.value, Numeric):
                    self.numeric_relations.add(q.relation_id)

    def compute_stats(self, train: Iterable[HyperFact]) -> None:
        values: dict[int, list[float]] = {}
        for rel, v in numeric_values(train):
            values.setdefault(rel, []).append(v)
        self.relation_stats = {
            rel: RelationStats(min(vs), max(vs), len(vs)) for rel, vs in sorted(values.items())
        }


def numeric_values(facts: Iterable[HyperFact]):
    """Yield ``(relation_id, value)`` for every numeric entity, tail and qualifiers pooled."""
    for fact in facts:
        t = fact.triplet
        if isinstance(t.tail, Numeric):
            yield t.relation_id, t.tail.value
        for q in fact.qualifiers:
            if isinstance(q.value, Numeric):
                yield q.relation_id, q.value.value


@dataclass
class Dataset:
    vocabulary: Vocabulary
    train: list[HyperFact] = field(default_factory=list)
    valid: list[HyperFact] = field(default_factory=list)
    test: list[HyperFact] = field(default_factory=list)

    def split(self, name: str) -> list[HyperFact]:
        if name not in ("train", "valid", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_facts(self) -> list[HyperFact]:
        return self.train + self.valid + self.test

    def violations(self) -> list[tuple[str, int, list[str]]]:
        out = []
        for name in ("train", "valid", "test"):
            for i, fact in enumerate(self.split(name)):
                problems = validate_fact(fact, self.vocabulary)
                if problems:
                    out.append((name, i, problems))
        return out


def _check_ref(ref: EntityRef, where: str, vocab: Vocabulary) -> list[str]:
    if isinstance(ref, Discrete):
        if not 0 <= ref.entity_id < vocab.num_entities:
            return [f"entity id out of range at {where}"]
    elif isinstance(ref, Numeric):
        if not math.isfinite(ref.value):
            return [f"non-finite numeric value at {where}"]
    else:
        return [f"unknown entity reference at {where}"]
    return []


def validate_fact(fact: HyperFact, vocab: Vocabulary) -> list[str]:
    """Return every violated invariant of ``fact``; an empty list means valid."""
    problems: list[str] = []
    t = fact.triplet
    if isinstance(t.head, Numeric):
        problems.append("numeric entity at head position")
    problems += _check_ref(t.head, "head", vocab)
    if not 0 <= t.relation_id < vocab.num_relations:
        problems.append("relation id out of range at relation")
    problems += _check_ref(t.tail, "tail", vocab)
    for j, q in enumerate(fact.qualifiers):
        if not 0 <= q.relation_id < vocab.num_relations:
            problems.append(f"relation id out of range at qualifier {j}")
        problems += _check_ref(q.value, f"qualifier {j} value", vocab)
    return problems


def facts_equal_mod_qualifier_order(a: HyperFact, b: HyperFact) -> bool:
    return a.triplet == b.triplet and Counter(a.qualifiers) == Counter(b.qualifiers)


def deduplicate(facts: Iterable[HyperFact]) -> tuple[list[HyperFact], int]:
    """Drop repeats (mod qualifier order), keeping first occurrences. Returns (facts, n_dropped)."""
    seen = set()
    kept = []
    dropped = 0
    for fact in facts:
        key = fact.canonical()
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        kept.append(fact)
    return kept, dropped
