"""Ranking metrics for link/relation prediction and RMSE for numeric values."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .batching import ENTITY, NUMERIC, REL, MaskSpec, build_batch, maskable_slots, split_by_mode
from .ingest import NormalizationTable
from .kg import HyperFact, _qualifier_sort_key, numeric_values

HITS_AT = (1, 3, 10)
SCOPES = ("tri", "all")


# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------


def rank(scores, gold: int, filter_ids: Iterable[int] = (), mode: str = "filtered") -> float:
    """Rank of ``gold`` among all candidates, ties split evenly.

    ``rank = 1 + #{strictly higher} + #{tied, excluding gold} / 2``. In
    filtered mode candidates in ``filter_ids`` (other known answers) are
    removed first; the gold itself is never removed.
    """
    scores = np.asarray(scores)
    if not 0 <= gold < scores.shape[0]:
        raise IndexError(f"gold {gold} outside candidate space of size {scores.shape[0]}")
    if mode not in ("raw", "filtered"):
        raise ValueError(f"mode must be 'raw' or 'filtered', not {mode!r}")
    keep = np.ones(scores.shape[0], bool)
    if mode == "filtered":
        ids = [i for i in filter_ids if i != gold]
        keep[ids] = False
    g = scores[gold]
    higher = np.count_nonzero(scores[keep] > g)
    ties = np.count_nonzero(scores[keep] == g) - 1
    return 1.0 + higher + 0.5 * ties


@dataclass(frozen=True)
class RankingMetrics:
    mrr: float
    hits: dict[int, float]
    count: int

    @classmethod
    def from_ranks(cls, ranks: Sequence[float], ks=HITS_AT) -> "RankingMetrics":
        if len(ranks) == 0:
            raise ValueError("no queries to score")
        r = [float(x) for x in ranks]
        n = len(r)
        # fsum is correctly rounded, so the result does not depend on summation order
        mrr = math.fsum(1.0 / x for x in r) / n
        return cls(mrr, {k: sum(1 for x in r if x <= k) / n for k in ks}, n)


def link_metrics(ranks: Sequence[float]) -> RankingMetrics:
    return RankingMetrics.from_ranks(ranks)


relation_metrics = link_metrics


@dataclass(frozen=True)
class NumericMetrics:
    rmse: float  # normalized space
    per_attribute: dict[int, float]  # raw units
    count: int


def numeric_metrics(
    predictions: Sequence[float],
    golds: Sequence[float],
    relations: Sequence[int],
    table: NormalizationTable,
    group_by_attribute: bool = True,
) -> NumericMetrics:
    """RMSE of normalized-space predictions, plus per-attribute RMSE in raw units."""
    pred = np.asarray(predictions, dtype=np.float64)
    gold = np.asarray(golds, dtype=np.float64)
    rels = np.asarray(relations, dtype=np.int64)
    if not (pred.shape == gold.shape == rels.shape) or pred.size == 0:
        raise ValueError("need equally long, non-empty predictions, golds and relations")
    for r in np.unique(rels):
        if int(r) not in table.ranges:
            raise KeyError(f"relation {int(r)} missing from the normalization table")
    err = pred - gold
    per_attr = {}
    if group_by_attribute:
        for r in np.unique(rels):
            e = err[rels == r] * table.scale(int(r))
            per_attr[int(r)] = float(np.sqrt(np.mean(e * e)))
    return NumericMetrics(float(np.sqrt(np.mean(err * err))), per_attr, int(pred.size))


# --------------------------------------------------------------------------
# filter index
# --------------------------------------------------------------------------


def query_key(fact: HyperFact, mask: MaskSpec) -> tuple:
    """Hashable form of ``fact`` with the masked slot blanked, qualifier order ignored."""
    t = fact.triplet
    if not mask.in_qualifier:
        parts = [t.head, t.relation_id, t.tail]
        parts[(("head", "relation", "tail").index(mask.slot))] = None
        quals = tuple(sorted(fact.qualifiers, key=_qualifier_sort_key))
        return ("tri", tuple(parts), quals)
    q = fact.qualifiers[mask.index]
    others = fact.qualifiers[: mask.index] + fact.qualifiers[mask.index + 1 :]
    blank = (None, q.value) if mask.slot == "qualifier_relation" else (q.relation_id, None)
    return ("qual", t, tuple(sorted(others, key=_qualifier_sort_key)), blank)


def build_filter_index(facts: Iterable[HyperFact]) -> dict[tuple, set[int]]:
    """Map each blanked query to every known discrete answer (entity or relation id)."""
    index: dict[tuple, set[int]] = defaultdict(set)
    for fact in facts:
        for mask in maskable_slots(fact):
            kind = mask.kind(fact)
            if kind == NUMERIC:
                continue
            index[(kind, query_key(fact, mask))].add(mask.target(fact))
    return dict(index)


# --------------------------------------------------------------------------
# evaluation driver
# --------------------------------------------------------------------------


@dataclass
class Predictions:
    """Raw per-query results from :func:`predict_queries`."""

    entity: list[tuple[int, int, np.ndarray]] = field(default_factory=list)  # (query idx, gold, probs)
    relation: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    numeric: list[tuple[int, float, float, int]] = field(default_factory=list)  # (query idx, pred, gold, rel)


def predict_queries(model, facts: Sequence[HyperFact], masks: Sequence[MaskSpec], batch_size: int = 512) -> Predictions:
    """Run eval-mode forwards for ``(fact, mask)`` queries in batches."""
    out = Predictions()
    for positions, fs, ms in split_by_mode(facts, masks):
        for start in range(0, len(fs), batch_size):
            chunk_f = fs[start : start + batch_size]
            chunk_m = ms[start : start + batch_size]
            batch = build_batch(chunk_f, chunk_m, model.num_entities, model.num_relations)
            res = model.forward_batch(batch, train=False)
            base = positions[start : start + batch_size]
            if res.entity_logits is not None:
                probs = ag.softmax(res.entity_logits, axis=-1).data
                for row, p in zip(res.entity_rows, probs):
                    out.entity.append((base[row], int(batch.target_id[row]), p))
            if res.relation_logits is not None:
                probs = ag.softmax(res.relation_logits, axis=-1).data
                for row, p in zip(res.relation_rows, probs):
                    out.relation.append((base[row], int(batch.target_id[row]), p))
            if res.numeric_pred is not None:
                for row, v in zip(res.numeric_rows, res.numeric_pred.data):
                    out.numeric.append((base[row], float(v), float(batch.target_value[row]), int(batch.numeric_relation[row])))
    return out


@dataclass
class EvalReport:
    link: dict[str, RankingMetrics | None]
    relation: dict[str, RankingMetrics | None]
    numeric: dict[str, NumericMetrics | None]
    mode: str = "filtered"

    def rows(self, vocab=None) -> list[dict]:
        out = []
        for task, table in (("link", self.link), ("relation", self.relation)):
            for scope in SCOPES:
                m = table.get(scope)
                row = {"task": task, "scope": scope, "mode": self.mode}
                if m is None:
                    row.update(count=0)
                else:
                    row.update(count=m.count, mrr=m.mrr, **{f"hits@{k}": v for k, v in m.hits.items()})
                out.append(row)
        for scope in SCOPES:
            m = self.numeric.get(scope)
            row = {"task": "numeric", "scope": scope, "mode": self.mode}
            if m is None:
                row.update(count=0)
            else:
                row.update(count=m.count, rmse=m.rmse)
                for rel, value in m.per_attribute.items():
                    name = vocab.relations.name(rel) if vocab is not None else str(rel)
                    row[f"rmse_raw[{name}]"] = value
            out.append(row)
        return out

    def to_csv(self, vocab=None) -> str:
        rows = self.rows(vocab)
        columns: list[str] = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        return buf.getvalue()

    def to_text(self, vocab=None) -> str:
        lines = [f"{'':10}{'scope':6}{'MRR':>9}{'Hit@10':>9}{'Hit@3':>9}{'Hit@1':>9}{'RMSE':>9}{'n':>7}"]
        for row in self.rows(vocab):
            label = row["task"] if row["scope"] == "tri" else ""
            if row["count"] == 0:
                lines.append(f"{label:10}{row['scope']:6}{'(no queries)':>45}")
                continue
            if row["task"] == "numeric":
                lines.append(f"{label:10}{row['scope']:6}{'':36}{row['rmse']:9.4f}{row['count']:7d}")
                for key, value in row.items():
                    if key.startswith("rmse_raw["):
                        lines.append(f"{'':16}{key[9:-1]:>36}{value:9.4g}")
            else:
                lines.append(
                    f"{label:10}{row['scope']:6}{row['mrr']:9.4f}{row['hits@10']:9.4f}"
                    f"{row['hits@3']:9.4f}{row['hits@1']:9.4f}{'':9}{row['count']:7d}"
                )
        return "\n".join(lines) + "\n"


def evaluate(
    model,
    facts: Sequence[HyperFact],
    table: NormalizationTable,
    filter_index: dict | None = None,
    mode: str = "filtered",
    batch_size: int = 512,
    scopes: Sequence[str] = SCOPES,
) -> EvalReport:
    """Score every maskable slot of ``facts``.

    Link queries cover discrete-entity slots only; numeric slots are scored
    by RMSE. The ``tri`` scope keeps primary-triplet slots; ``all`` keeps every
    slot. A scope with no queries of some task reports None for that task.
    """
    if mode == "filtered" and filter_index is None:
        raise ValueError("filtered mode needs a filter index")
    q_facts, q_masks = [], []
    for fact in facts:
        for mask in maskable_slots(fact):
            q_facts.append(fact)
            q_masks.append(mask)
    preds = predict_queries(model, q_facts, q_masks, batch_size) if q_facts else Predictions()
    in_tri = np.array([not m.in_qualifier for m in q_masks], bool)

    def ranks_for(items, kind):
        out = []
        for qi, gold, probs in items:
            filt = ()
            if mode == "filtered":
                filt = filter_index.get((kind, query_key(q_facts[qi], q_masks[qi])), ())
            out.append((qi, rank(probs, gold, filt, mode)))
        return out

    link_ranks = ranks_for(preds.entity, ENTITY)
    rel_ranks = ranks_for(preds.relation, REL)

    def scoped(items, scope):
        return [x for x in items if scope == "all" or in_tri[x[0]]]

    link, relation, numeric = {}, {}, {}
    for scope in scopes:
        lr = [r for _, r in scoped(link_ranks, scope)]
        rr = [r for _, r in scoped(rel_ranks, scope)]
        nm = scoped(preds.numeric, scope)
        link[scope] = link_metrics(lr) if lr else None
        relation[scope] = relation_metrics(rr) if rr else None
        numeric[scope] = (
            numeric_metrics([p for _, p, _, _ in nm], [g for _, _, g, _ in nm], [r for *_, r in nm], table)
            if nm
            else None
        )
    return EvalReport(link, relation, numeric, mode)


def mean_baseline_rmse(train: Sequence[HyperFact], test: Sequence[HyperFact]) -> dict[int, tuple[float, int]]:
    """Per relation, RMSE on ``test`` numeric slots of predicting the training mean."""
    sums: dict[int, list[float]] = defaultdict(list)
    for rel, v in numeric_values(train):
        sums[rel].append(v)
    means = {r: float(np.mean(vs)) for r, vs in sums.items()}
    errs: dict[int, list[float]] = defaultdict(list)
    for rel, v in numeric_values(test):
        if rel in means:
            errs[rel].append(v - means[rel])
    return {r: (math.sqrt(float(np.mean(np.square(e)))), len(e)) for r, e in errs.items()}
