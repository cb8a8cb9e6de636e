"""Fact-file parsing, numeric normalization, splitting and synthetic data.

Fact file format: UTF-8, one fact per line, whitespace-separated tokens::

    head relation tail [qual_relation qual_value]...

Numeric literals carry a ``#`` prefix (``#80``, ``#1988.79``); ISO dates
(``#1922-01-28``) and year-months (``#1922-01``) are converted with
:func:`date_to_real`. Blank lines and lines starting with ``%`` are skipped.
"""

from __future__ import annotations

import calendar
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kg import (
    Dataset,
    Discrete,
    EntityRef,
    HyperFact,
    Numeric,
    PrimaryTriplet,
    Qualifier,
    Vocabulary,
    deduplicate,
    numeric_values,
    validate_fact,
)

log = logging.getLogger(__name__)

NUMERIC_SIGIL = "#"
SPLITS = ("train", "valid", "test")

# days elapsed before each month in a non-leap year
_DAYS_BEFORE_MONTH = (0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334)
_DATE_RE = re.compile(r"^(-?\d{1,6})-(\d{1,2})(?:-(\d{1,2}))?$")


class FactFileError(ValueError):
    """A fact file line could not be parsed."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = f"{self.path}:{line}: " if line is not None else f"{self.path}: "
        super().__init__(where + message)


def date_to_real(year: int, month: int = 0, day: int = 0) -> float:
    """Map a calendar date to ``year + day_of_year / 365``.

    ``day_of_year`` is the number of days before ``month`` in a non-leap year
    plus the day of the month, so January 28th gives 28/365. A zero month (and
    day) means a year-only literal and returns the bare year; a zero day with
    a real month counts the days before that month.
    """
    if month == 0:
        if day != 0:
            raise ValueError("day given without a month")
        return float(year)
    if not 1 <= month <= 12:
        raise ValueError(f"invalid month {month}")
    if day == 0:
        return year + _DAYS_BEFORE_MONTH[month - 1] / 365
    # monthrange needs a year in datetime's range; leap-ness repeats every 400 years
    days_in_month = calendar.monthrange(2000 + (year % 400), month)[1]
    if not 1 <= day <= days_in_month:
        raise ValueError(f"invalid day {day} for month {month}")
    return year + (_DAYS_BEFORE_MONTH[month - 1] + day) / 365


def parse_numeric_literal(token: str) -> float:
    """Parse the text after the ``#`` sigil into a finite real."""
    m = _DATE_RE.match(token)
    if m:
        year, month, day = int(m.group(1)), int(m.group(2)), int(m.group(3) or 0)
        return date_to_real(year, month, day)
    try:
        value = float(token)
    except ValueError:
        raise ValueError(f"bad numeric literal {NUMERIC_SIGIL}{token}") from None
    if not math.isfinite(value):
        raise ValueError(f"non-finite numeric literal {NUMERIC_SIGIL}{token}")
    return value


def format_numeric_literal(value: float) -> str:
    return NUMERIC_SIGIL + repr(float(value))


def _entity(token: str, vocab: Vocabulary, frozen: bool) -> EntityRef:
    if token.startswith(NUMERIC_SIGIL):
        return Numeric(parse_numeric_literal(token[1:]))
    if frozen:
        idx = vocab.entities.get(token)
        if idx is None:
            raise ValueError(f"unknown entity {token!r}")
        return Discrete(idx)
    return Discrete(vocab.entities.add(token))


def _relation(token: str, vocab: Vocabulary, frozen: bool) -> int:
    if token.startswith(NUMERIC_SIGIL):
        raise ValueError(f"numeric literal {token!r} in relation position")
    if frozen:
        idx = vocab.relations.get(token)
        if idx is None:
            raise ValueError(f"unknown relation {token!r}")
        return idx
    return vocab.relations.add(token)


def parse_fact_line(line: str, vocab: Vocabulary, frozen: bool = False) -> HyperFact:
    tokens = line.split()
    if len(tokens) < 3 or (len(tokens) - 3) % 2:
        raise ValueError(f"expected 3 + 2k tokens, got {len(tokens)}")
    head = _entity(tokens[0], vocab, frozen)
    rel = _relation(tokens[1], vocab, frozen)
    tail = _entity(tokens[2], vocab, frozen)
    quals = []
    for i in range(3, len(tokens), 2):
        q = _relation(tokens[i], vocab, frozen)
        quals.append(Qualifier(q, _entity(tokens[i + 1], vocab, frozen)))
    return HyperFact(PrimaryTriplet(head, rel, tail), tuple(quals))


def parse_fact_file(path, vocab: Vocabulary | None = None, vocab_mode: str = "build") -> tuple[list[HyperFact], Vocabulary]:
    """Parse a fact file into facts plus the (possibly extended) vocabulary.

    In ``build`` mode unseen tokens extend ``vocab`` (a fresh one if None);
    in ``frozen`` mode they are errors. Numeric relations are recorded on the
    vocabulary as they are seen.
    """
    if vocab_mode not in ("build", "frozen"):
        raise ValueError(f"vocab_mode must be 'build' or 'frozen', not {vocab_mode!r}")
    frozen = vocab_mode == "frozen"
    if vocab is None:
        if frozen:
            raise ValueError("frozen mode needs a vocabulary")
        vocab = Vocabulary()
    facts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            try:
                fact = parse_fact_line(stripped, vocab, frozen)
            except ValueError as exc:
                raise FactFileError(str(exc), path, lineno) from None
            facts.append(fact)
    vocab.observe(facts)
    return facts, vocab


def format_fact(fact: HyperFact, vocab: Vocabulary) -> str:
    def ent(ref: EntityRef) -> str:
        if isinstance(ref, Numeric):
            return format_numeric_literal(ref.value)
        return vocab.entities.name(ref.entity_id)

    t = fact.triplet
    parts = [ent(t.head), vocab.relations.name(t.relation_id), ent(t.tail)]
    for q in fact.qualifiers:
        parts += [vocab.relations.name(q.relation_id), ent(q.value)]
    return " ".join(parts)


def write_fact_file(path, facts: list[HyperFact], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fact in facts:
            fh.write(format_fact(fact, vocab) + "\n")


def load_dataset(directory, vocab: Vocabulary | None = None) -> Dataset:
    """Read ``train.txt``, ``valid.txt`` and ``test.txt`` from ``directory``.

    With ``vocab`` given (e.g. from a checkpoint) tokens must already be
    known and keep their ids. Missing valid/test files are treated as empty. Duplicates are dropped,
    both within a split and across splits (later splits lose the copy).
    Relation statistics come from the train split only.
    """
    directory = Path(directory)
    mode = "build" if vocab is None else "frozen"
    vocab = vocab if vocab is not None else Vocabulary()
    splits: dict[str, list[HyperFact]] = {}
    for name in SPLITS:
        path = directory / f"{name}.txt"
        if not path.exists():
            if name == "train":
                raise FactFileError("missing train split", path)
            splits[name] = []
            continue
        splits[name], _ = parse_fact_file(path, vocab, mode)

    seen: set = set()
    for name in SPLITS:
        facts, dropped = deduplicate(splits[name])
        kept = [f for f in facts if f.canonical() not in seen]
        dropped += len(facts) - len(kept)
        seen.update(f.canonical() for f in kept)
        if dropped:
            log.warning("dropped %d duplicate facts from %s split", dropped, name)
        splits[name] = kept

    dataset = Dataset(vocab, splits["train"], splits["valid"], splits["test"])
    vocab.compute_stats(dataset.train)
    return dataset


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_fact_file(directory / f"{name}.txt", dataset.split(name), dataset.vocabulary)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


@dataclass
class NormalizationTable:
    """Per-relation min/max of training values, keyed by relation id."""

    ranges: dict[int, tuple[float, float]] = field(default_factory=dict)
    applied: bool = False

    def is_constant(self, relation_id: int) -> bool:
        lo, hi = self.ranges[relation_id]
        return lo == hi

    def normalize(self, relation_id: int, value: float) -> float:
        lo, hi = self.ranges[relation_id]
        if hi == lo:
            return 0.5
        return (value - lo) / (hi - lo)

    def denormalize(self, relation_id: int, value: float) -> float:
        lo, hi = self.ranges[relation_id]
        if hi == lo:
            return lo
        return value * (hi - lo) + lo

    def scale(self, relation_id: int) -> float:
        """Factor turning a normalized-space error into raw units."""
        lo, hi = self.ranges[relation_id]
        return hi - lo

    def dump(self, path, vocab: Vocabulary) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"% applied {int(self.applied)}\n")
            for rel, (lo, hi) in sorted(self.ranges.items()):
                fh.write(f"{vocab.relations.name(rel)}\t{lo!r}\t{hi!r}\n")

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "NormalizationTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("% applied"):
                    table.applied = bool(int(line.split()[-1]))
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise FactFileError("expected 'relation<TAB>min<TAB>max'", path, lineno)
                rel = vocab.relations.get(parts[0])
                if rel is None:
                    raise FactFileError(f"unknown relation {parts[0]!r}", path, lineno)
                table.ranges[rel] = (float(parts[1]), float(parts[2]))
        return table


def compute_normalization(train: list[HyperFact]) -> NormalizationTable:
    if not train:
        raise ValueError("cannot compute normalization from an empty train split")
    ranges: dict[int, tuple[float, float]] = {}
    for rel, v in numeric_values(train):
        if rel in ranges:
            lo, hi = ranges[rel]
            ranges[rel] = (min(lo, v), max(hi, v))
        else:
            ranges[rel] = (v, v)
    return NormalizationTable(dict(sorted(ranges.items())))


def _map_values(fact: HyperFact, fn) -> HyperFact:
    t = fact.triplet
    tail = Numeric(fn(t.relation_id, t.tail.value)) if isinstance(t.tail, Numeric) else t.tail
    quals = tuple(
        Qualifier(q.relation_id, Numeric(fn(q.relation_id, q.value.value))) if isinstance(q.value, Numeric) else q
        for q in fact.qualifiers
    )
    return HyperFact(PrimaryTriplet(t.head, t.relation_id, tail), quals)


def normalize_dataset(dataset: Dataset, table: NormalizationTable) -> Dataset:
    """Min-max rescale every numeric value. Out-of-range valid/test values are not clipped."""

    def fn(rel: int, v: float) -> float:
        if rel not in table.ranges:
            log.warning("relation %d has no training values; left unnormalized", rel)
            return v
        return table.normalize(rel, v)

    out = Dataset(
        dataset.vocabulary,
        [_map_values(f, fn) for f in dataset.train],
        [_map_values(f, fn) for f in dataset.valid],
        [_map_values(f, fn) for f in dataset.test],
    )
    table.applied = True
    return out


def denormalize_facts(facts: list[HyperFact], table: NormalizationTable) -> list[HyperFact]:
    return [_map_values(f, lambda rel, v: table.denormalize(rel, v) if rel in table.ranges else v) for f in facts]


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def split_sizes(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    exact = [n * r for r in ratios]
    sizes = [int(math.floor(x)) for x in exact]
    remainder = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def split_dataset(facts: list, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, ...]:
    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    needed = sum(1 for r in ratios if r > 0)
    if len(facts) < needed:
        raise ValueError(f"{len(facts)} facts cannot fill {needed} splits")
    order = np.random.default_rng(seed).permutation(len(facts))
    shuffled = [facts[i] for i in order]
    out = []
    start = 0
    for size in split_sizes(len(facts), ratios):
        out.append(shuffled[start : start + size])
        start += size
    return tuple(out)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

TIME_RELATION = "point_in_time"


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic HN-KG with learnable structure.

    Discrete facts follow a modular rule over the latent ordering of the
    entities, so every slot is a function of the others. Numeric facts carry a
    ``point_in_time`` qualifier and follow, per attribute relation,
    ``value = a * latent(head) + b * time + noise_scale * N(0, 1)``
    where ``time`` counts years since ``base_year``.

    ``num_numeric_relations`` includes the ``point_in_time`` relation, so it
    must be at least 2 for any attribute to exist.
    """

    num_entities: int = 50
    num_discrete_relations: int = 7
    num_numeric_relations: int = 3
    num_facts: int = 500
    max_qualifiers: int = 2
    seed: int = 0
    noise_scale: float = 0.0
    numeric_fraction: float = 0.4
    num_times: int = 10
    base_year: int = 2000
    # per attribute relation (a, b); drawn from the seed when None
    laws: list[tuple[float, float]] | None = None

    def validate(self) -> None:
        for name in ("num_entities", "num_discrete_relations", "num_facts", "num_times"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_numeric_relations < 2:
            raise ValueError("num_numeric_relations must be >= 2 (point_in_time plus an attribute)")
        if self.max_qualifiers < 1:
            raise ValueError("max_qualifiers must be >= 1 to hold the time qualifier")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0.0 <= self.numeric_fraction <= 1.0:
            raise ValueError("numeric_fraction must lie in [0, 1]")
        if self.laws is not None and len(self.laws) != self.num_numeric_relations - 1:
            raise ValueError("need one (a, b) law per attribute relation")


@dataclass
class SyntheticKG:
    facts: list[HyperFact]
    vocabulary: Vocabulary
    latent: np.ndarray
    laws: dict[int, tuple[float, float]]
    spec: SyntheticSpec

    def planted_value(self, entity_id: int, relation_id: int, time: float) -> float:
        """Noise-free value of the planted law."""
        a, b = self.laws[relation_id]
        return a * self.latent[entity_id] + b * time


def generate_synthetic(spec: SyntheticSpec) -> SyntheticKG:
    """Deterministically generate exactly ``spec.num_facts`` distinct facts."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_ent = spec.num_entities

    vocab = Vocabulary()
    for i in range(n_ent):
        vocab.entities.add(f"e{i}")
    disc_rels = [vocab.relations.add(f"r{i}") for i in range(spec.num_discrete_relations)]
    time_rel = vocab.relations.add(TIME_RELATION)
    attr_rels = [vocab.relations.add(f"attr{i}") for i in range(spec.num_numeric_relations - 1)]

    latent = rng.uniform(0.0, 1.0, size=n_ent)
    rank = np.empty(n_ent, dtype=np.int64)
    rank[np.argsort(latent, kind="stable")] = np.arange(n_ent)
    by_rank = np.argsort(latent, kind="stable")
    shift = {r: int(rng.integers(1, n_ent)) if n_ent > 1 else 0 for r in disc_rels}
    if spec.laws is None:
        # |b| bounded away from 0 so the time qualifier is recoverable from the value
        signs = rng.choice([-1.0, 1.0], size=(len(attr_rels), 2))
        laws = {
            r: (float(sa * rng.uniform(1.0, 2.0)), float(sb * rng.uniform(0.1, 0.2)))
            for r, (sa, sb) in zip(attr_rels, signs)
        }
    else:
        laws = {r: (float(a), float(b)) for r, (a, b) in zip(attr_rels, spec.laws)}

    max_disc_quals = min(spec.max_qualifiers, len(disc_rels))
    facts: list[HyperFact] = []
    seen: set = set()
    attempts = 0
    max_attempts = 200 * spec.num_facts
    while len(facts) < spec.num_facts:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError("could not draw enough distinct facts; enlarge the entity or relation counts")
        h = int(rng.integers(n_ent))
        if rng.random() < spec.numeric_fraction:
            r = attr_rels[int(rng.integers(len(attr_rels)))]
            time = int(rng.integers(spec.num_times))
            a, b = laws[r]
            value = a * latent[h] + b * time
            if spec.noise_scale > 0:
                value += spec.noise_scale * rng.standard_normal()
            fact = HyperFact(
                PrimaryTriplet(Discrete(h), r, Numeric(float(value))),
                (Qualifier(time_rel, Numeric(float(spec.base_year + time))),),
            )
        else:
            r = disc_rels[int(rng.integers(len(disc_rels)))]
            k = int(rng.integers(max_disc_quals + 1))
            qual_rels = rng.choice(disc_rels, size=k, replace=False) if k else []
            pos = rank[h] + shift[r]
            quals = []
            for q in qual_rels:
                c = int(rng.integers(n_ent))
                pos += rank[c] + shift[int(q)]
                quals.append(Qualifier(int(q), Discrete(c)))
            tail = int(by_rank[pos % n_ent])
            fact = HyperFact(PrimaryTriplet(Discrete(h), r, Discrete(tail)), tuple(quals))
        key = fact.canonical()
        if key in seen:
            continue
        seen.add(key)
        facts.append(fact)

    vocab.observe(facts)
    for fact in facts:
        problems = validate_fact(fact, vocab)
        assert not problems, problems
    return SyntheticKG(facts, vocab, latent, laws, spec)


def synthetic_dataset(spec: SyntheticSpec, ratios=(0.8, 0.1, 0.1), split_seed: int | None = None) -> Dataset:
    kg = generate_synthetic(spec)
    train, valid, test = split_dataset(kg.facts, ratios, spec.seed if split_seed is None else split_seed)
    dataset = Dataset(kg.vocabulary, list(train), list(valid), list(test))
    kg.vocabulary.compute_stats(dataset.train)
    return dataset
