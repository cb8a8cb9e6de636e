"""Mask specifications and padded batches of masked facts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kg import Discrete, EntityRef, HyperFact, Numeric

HEAD = "head"
RELATION = "relation"
TAIL = "tail"
QUAL_RELATION = "qualifier_relation"
QUAL_VALUE = "qualifier_value"
SLOTS = (HEAD, RELATION, TAIL, QUAL_RELATION, QUAL_VALUE)

ENTITY, REL, NUMERIC = 0, 1, 2
KIND_NAMES = {ENTITY: "discrete_entity", REL: "relation", NUMERIC: "numeric"}

# column of the prediction-transformer output holding each slot
_READ_COLUMN = {HEAD: 1, RELATION: 2, TAIL: 3, QUAL_RELATION: 1, QUAL_VALUE: 2}


@dataclass(frozen=True)
class MaskSpec:
    """Names the single slot of a fact replaced by a mask.

    ``index`` is the qualifier position for qualifier slots and None otherwise.
    """

    slot: str
    index: int | None = None

    def __post_init__(self):
        if self.slot not in SLOTS:
            raise ValueError(f"unknown slot {self.slot!r}")
        if self.in_qualifier:
            if self.index is None or self.index < 0:
                raise ValueError(f"{self.slot} needs a qualifier index")
        elif self.index is not None:
            raise ValueError(f"{self.slot} takes no qualifier index")

    @property
    def in_qualifier(self) -> bool:
        return self.slot in (QUAL_RELATION, QUAL_VALUE)

    def check(self, fact: HyperFact) -> None:
        if self.in_qualifier and self.index >= fact.num_qualifiers:
            raise IndexError(f"fact has {fact.num_qualifiers} qualifiers, mask names qualifier {self.index}")

    def content(self, fact: HyperFact) -> EntityRef | int:
        """The fact's component at the masked slot."""
        self.check(fact)
        t = fact.triplet
        if self.slot == HEAD:
            return t.head
        if self.slot == RELATION:
            return t.relation_id
        if self.slot == TAIL:
            return t.tail
        q = fact.qualifiers[self.index]
        return q.relation_id if self.slot == QUAL_RELATION else q.value

    def kind(self, fact: HyperFact) -> int:
        if self.slot in (RELATION, QUAL_RELATION):
            return REL
        return NUMERIC if isinstance(self.content(fact), Numeric) else ENTITY

    def target(self, fact: HyperFact):
        """Entity id, relation id, or numeric value at the slot."""
        c = self.content(fact)
        if isinstance(c, Discrete):
            return c.entity_id
        if isinstance(c, Numeric):
            return c.value
        return c

    def governing_relation(self, fact: HyperFact) -> int:
        """Relation whose numeric weights embed (and read out) this slot's value."""
        if self.in_qualifier:
            return fact.qualifiers[self.index].relation_id
        return fact.triplet.relation_id


def maskable_slots(fact: HyperFact) -> list[MaskSpec]:
    out = [MaskSpec(HEAD), MaskSpec(RELATION), MaskSpec(TAIL)]
    for j in range(fact.num_qualifiers):
        out += [MaskSpec(QUAL_RELATION, j), MaskSpec(QUAL_VALUE, j)]
    return out


@dataclass
class Batch:
    """Masked facts in array form, qualifiers padded to the longest list.

    All instances share one prediction layout: either every mask sits in the
    primary triplet or every mask sits in a qualifier (``qualifier_mode``).
    Entity and relation ids equal to the vocabulary size denote the mask rows.
    """

    qualifier_mode: bool
    head: np.ndarray  # (B,)
    relation: np.ndarray  # (B,)
    tail_id: np.ndarray  # (B,)
    tail_is_num: np.ndarray  # (B,) bool
    tail_value: np.ndarray  # (B,)
    tail_masked_num: np.ndarray  # (B,) bool
    qual_relation: np.ndarray  # (B, K)
    qual_id: np.ndarray  # (B, K)
    qual_is_num: np.ndarray  # (B, K) bool
    qual_value: np.ndarray  # (B, K)
    qual_masked_num: np.ndarray  # (B, K) bool
    qual_valid: np.ndarray  # (B, K) bool
    qual_index: np.ndarray  # (B,) masked qualifier position (0 in triplet mode)
    read_column: np.ndarray  # (B,)
    kind: np.ndarray  # (B,) ENTITY / REL / NUMERIC
    target_id: np.ndarray  # (B,) entity or relation id, -1 for numeric
    target_value: np.ndarray  # (B,) numeric target, 0 otherwise
    numeric_relation: np.ndarray  # (B,) relation of the masked numeric value, -1 otherwise

    def __len__(self) -> int:
        return len(self.head)

    @property
    def max_qualifiers(self) -> int:
        return self.qual_relation.shape[1]


def build_batch(
    facts: Sequence[HyperFact],
    masks: Sequence[MaskSpec],
    num_entities: int,
    num_relations: int,
    pad_to: int | None = None,
) -> Batch:
    """Lay out masked facts; every mask must be in the triplet, or every mask in a qualifier."""
    if len(facts) != len(masks) or not facts:
        raise ValueError("need one mask per fact and at least one fact")
    modes = {m.in_qualifier for m in masks}
    if len(modes) != 1:
        raise ValueError("a batch mixes triplet and qualifier masks; split it first")
    b = len(facts)
    k = max(f.num_qualifiers for f in facts)
    if pad_to is not None:
        if pad_to < k:
            raise ValueError(f"pad_to={pad_to} is shorter than the longest qualifier list ({k})")
        k = pad_to
    ent_mask, rel_mask = num_entities, num_relations

    head = np.zeros(b, np.int64)
    relation = np.zeros(b, np.int64)
    tail_id = np.zeros(b, np.int64)
    tail_is_num = np.zeros(b, bool)
    tail_value = np.zeros(b)
    tail_masked_num = np.zeros(b, bool)
    qual_relation = np.zeros((b, k), np.int64)
    qual_id = np.zeros((b, k), np.int64)
    qual_is_num = np.zeros((b, k), bool)
    qual_value = np.zeros((b, k))
    qual_masked_num = np.zeros((b, k), bool)
    qual_valid = np.zeros((b, k), bool)
    qual_index = np.zeros(b, np.int64)
    read_column = np.zeros(b, np.int64)
    kind = np.zeros(b, np.int64)
    target_id = np.full(b, -1, np.int64)
    target_value = np.zeros(b)
    numeric_relation = np.full(b, -1, np.int64)

    for i, (fact, mask) in enumerate(zip(facts, masks)):
        mask.check(fact)
        t = fact.triplet
        if not isinstance(t.head, Discrete):
            raise ValueError("numeric entity at head position")
        head[i] = t.head.entity_id
        relation[i] = t.relation_id
        if isinstance(t.tail, Numeric):
            tail_is_num[i] = True
            tail_value[i] = t.tail.value
        else:
            tail_id[i] = t.tail.entity_id
        for j, q in enumerate(fact.qualifiers):
            qual_valid[i, j] = True
            qual_relation[i, j] = q.relation_id
            if isinstance(q.value, Numeric):
                qual_is_num[i, j] = True
                qual_value[i, j] = q.value.value
            else:
                qual_id[i, j] = q.value.entity_id

        kd = mask.kind(fact)
        kind[i] = kd
        read_column[i] = _READ_COLUMN[mask.slot]
        if mask.in_qualifier:
            qual_index[i] = mask.index
        if kd == NUMERIC:
            target_value[i] = mask.target(fact)
            numeric_relation[i] = mask.governing_relation(fact)
        else:
            target_id[i] = mask.target(fact)

        j = mask.index
        if mask.slot == HEAD:
            head[i] = ent_mask
        elif mask.slot == RELATION:
            relation[i] = rel_mask
        elif mask.slot == TAIL:
            if kd == NUMERIC:
                tail_masked_num[i] = True
                tail_value[i] = 0.0
            else:
                tail_id[i] = ent_mask
        elif mask.slot == QUAL_RELATION:
            qual_relation[i, j] = rel_mask
        else:
            if kd == NUMERIC:
                qual_masked_num[i, j] = True
                qual_value[i, j] = 0.0
            else:
                qual_id[i, j] = ent_mask

    return Batch(
        qualifier_mode=modes.pop(),
        head=head,
        relation=relation,
        tail_id=tail_id,
        tail_is_num=tail_is_num,
        tail_value=tail_value,
        tail_masked_num=tail_masked_num,
        qual_relation=qual_relation,
        qual_id=qual_id,
        qual_is_num=qual_is_num,
        qual_value=qual_value,
        qual_masked_num=qual_masked_num,
        qual_valid=qual_valid,
        qual_index=qual_index,
        read_column=read_column,
        kind=kind,
        target_id=target_id,
        target_value=target_value,
        numeric_relation=numeric_relation,
    )


def split_by_mode(facts: Sequence[HyperFact], masks: Sequence[MaskSpec]):
    """Yield ``(positions, facts, masks)`` for the triplet group then the qualifier group."""
    for mode in (False, True):
        pos = [i for i, m in enumerate(masks) if m.in_qualifier == mode]
        if pos:
            yield pos, [facts[i] for i in pos], [masks[i] for i in pos]
