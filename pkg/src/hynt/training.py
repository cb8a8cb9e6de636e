"""Masked-instance generation, the joint loss and the optimization loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tape
from .batching import ENTITY, NUMERIC, REL, MaskSpec, build_batch, maskable_slots, split_by_mode
from .evaluation import EvalReport, build_filter_index, evaluate
from .ingest import NormalizationTable
from .kg import Dataset, HyperFact
from .model import HyNT, HyntConfig, Output
from .optim import Adam, CosineRestarts

log = logging.getLogger(__name__)

# ablation switches: which mask types are withheld from training
NO_MASK_CHOICES = ("R", "V_N", "E_qual")
LOG_COLUMNS = (
    "epoch", "lr", "loss", "loss_ent", "loss_rel", "loss_num",
    "val_link_mrr", "val_rel_mrr", "val_rmse",
)


class TrainingDiverged(RuntimeError):
    """The loss or an activation became non-finite."""


@dataclass(frozen=True)
class TrainInstance:
    fact: HyperFact
    mask: MaskSpec

    @property
    def kind(self) -> int:
        return self.mask.kind(self.fact)

    @property
    def target(self):
        return self.mask.target(self.fact)


def _allowed(fact: HyperFact, mask: MaskSpec, no_mask: Sequence[str]) -> bool:
    if "E_qual" in no_mask and mask.in_qualifier:
        return False
    kind = mask.kind(fact)
    if "R" in no_mask and kind == REL:
        return False
    if "V_N" in no_mask and kind == NUMERIC:
        return False
    return True


def make_instances(
    facts: Sequence[HyperFact],
    strategy: str = "enumerate",
    rng: np.random.Generator | None = None,
    no_mask: Sequence[str] = (),
) -> list[TrainInstance]:
    """Masked training instances.

    ``enumerate`` yields one instance per maskable slot of every fact;
    ``sample`` draws one slot per fact uniformly. ``no_mask`` withholds whole
    mask types (``R`` relations, ``V_N`` numeric values, ``E_qual`` every
    qualifier slot).
    """
    bad = set(no_mask) - set(NO_MASK_CHOICES)
    if bad:
        raise ValueError(f"unknown mask types {sorted(bad)}; choose from {NO_MASK_CHOICES}")
    out = []
    for fact in facts:
        slots = [m for m in maskable_slots(fact) if _allowed(fact, m, no_mask)]
        if not slots:
            continue
        if strategy == "enumerate":
            out.extend(TrainInstance(fact, m) for m in slots)
        elif strategy == "sample":
            if rng is None:
                raise ValueError("sample strategy needs a random generator")
            out.append(TrainInstance(fact, slots[int(rng.integers(len(slots)))]))
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
    return out


@dataclass
class LossParts:
    """Per-category sums and counts accumulated over the groups of a batch."""

    ent_sum: ag.Tensor | None = None
    rel_sum: ag.Tensor | None = None
    num_sum: ag.Tensor | None = None
    n_ent: int = 0
    n_rel: int = 0
    n_num: int = 0

    def add(self, out: Output, batch, epsilon: float) -> None:
        if out.entity_logits is not None:
            targets = batch.target_id[out.entity_rows]
            self.ent_sum = _acc(self.ent_sum, ag.cross_entropy_smoothed(out.entity_logits, targets, epsilon, "sum"))
            self.n_ent += len(targets)
        if out.relation_logits is not None:
            targets = batch.target_id[out.relation_rows]
            self.rel_sum = _acc(self.rel_sum, ag.cross_entropy_smoothed(out.relation_logits, targets, epsilon, "sum"))
            self.n_rel += len(targets)
        if out.numeric_pred is not None:
            targets = batch.target_value[out.numeric_rows]
            self.num_sum = _acc(self.num_sum, ag.mse(out.numeric_pred, targets, "sum"))
            self.n_num += len(targets)


def _acc(total, term):
    return term if total is None else ag.add(total, term)


def joint_loss(parts: LossParts, lambda_rel: float = 1.0, lambda_num: float = 1.0) -> tuple[ag.Tensor, dict[str, float]]:
    """``mean L_ent + lambda_rel * mean L_rel + lambda_num * mean L_num``; absent categories add 0."""
    terms = []
    values = {"loss_ent": 0.0, "loss_rel": 0.0, "loss_num": 0.0}
    for key, total, count, weight in (
        ("loss_ent", parts.ent_sum, parts.n_ent, 1.0),
        ("loss_rel", parts.rel_sum, parts.n_rel, lambda_rel),
        ("loss_num", parts.num_sum, parts.n_num, lambda_num),
    ):
        if total is None:
            continue
        mean = ag.mul(total, 1.0 / count)
        values[key] = float(mean.data)
        if weight != 0.0:
            terms.append(ag.mul(mean, weight) if weight != 1.0 else mean)
    if not terms:
        return ag.Tensor(0.0), values
    loss = terms[0]
    for t in terms[1:]:
        loss = ag.add(loss, t)
    values["loss"] = float(loss.data)
    return loss, values


def batch_loss(
    model: HyNT,
    instances: Sequence[TrainInstance],
    train: bool = True,
    rng: np.random.Generator | None = None,
    pad_to: int | None = None,
) -> tuple[ag.Tensor, dict[str, float]]:
    """Forward a mixed batch (split by prediction layout) and return the joint loss."""
    facts = [inst.fact for inst in instances]
    masks = [inst.mask for inst in instances]
    parts = LossParts()
    cfg = model.config
    for _, fs, ms in split_by_mode(facts, masks):
        batch = build_batch(fs, ms, model.num_entities, model.num_relations, pad_to=pad_to)
        out = model.forward_batch(batch, train=train, rng=rng)
        parts.add(out, batch, cfg.label_smoothing)
    loss, values = joint_loss(parts, cfg.lambda_rel, cfg.lambda_num)
    values.setdefault("loss", float(loss.data))
    return loss, values


@dataclass
class TrainOptions:
    epochs: int = 300
    batch_size: int = 256
    seed: int = 0
    validate_every: int = 10
    lr: float = 5e-4
    min_lr: float = 0.0
    t0: float = 50.0
    t_mult: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    strategy: str = "enumerate"
    no_mask: tuple[str, ...] = ()
    eval_mode: str = "filtered"
    eval_batch_size: int = 512


@dataclass
class TrainResult:
    model: HyNT
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_report: EvalReport | None
    log: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def best_model(self) -> HyNT:
        m = copy.copy(self.model)
        m.params = {k: ag.Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.best_state.items()}
        return m


def _selection_key(report: EvalReport) -> tuple[float, float, float]:
    def mrr(m):
        return m.mrr if m is not None else float("-inf")

    rmse = report.numeric["all"].rmse if report.numeric.get("all") is not None else float("inf")
    return (mrr(report.link.get("all")), mrr(report.relation.get("all")), -rmse)


def train(
    dataset: Dataset,
    config: HyntConfig,
    options: TrainOptions | None = None,
    table: NormalizationTable | None = None,
    progress=None,
) -> TrainResult:
    """Train HyNT on ``dataset.train`` (numeric values already normalized).

    Validation runs every ``validate_every`` epochs (and after the last one)
    when the valid split is non-empty; the state with the best validation
    link MRR is kept, the earlier epoch winning ties. Without validation the
    final state is the best state.
    """
    options = options or TrainOptions()
    vocab = dataset.vocabulary
    rng = np.random.default_rng(options.seed)
    model = HyNT(config, vocab.num_entities, vocab.num_relations, seed=options.seed)
    opt = Adam(model.params, lr=options.lr, beta1=options.beta1, beta2=options.beta2, eps=options.adam_eps)
    schedule = CosineRestarts(options.lr, options.min_lr, options.t0, options.t_mult)
    table = table or NormalizationTable()
    filter_index = build_filter_index(dataset.all_facts()) if options.eval_mode == "filtered" else None

    fixed = None
    if options.strategy == "enumerate":
        fixed = make_instances(dataset.train, "enumerate", no_mask=options.no_mask)
        if not fixed:
            raise ValueError("no training instances after mask filtering")

    best_key = None
    best_state = model.state_dict()
    best_epoch = -1
    best_report = None
    rows: list[dict] = []
    epoch_losses: list[float] = []

    for epoch in range(options.epochs):
        instances = fixed if fixed is not None else make_instances(dataset.train, "sample", rng, options.no_mask)
        order = rng.permutation(len(instances))
        n_batches = (len(instances) + options.batch_size - 1) // options.batch_size
        sums = {"loss": 0.0, "loss_ent": 0.0, "loss_rel": 0.0, "loss_num": 0.0}
        lr = options.lr
        for b in range(n_batches):
            idx = order[b * options.batch_size : (b + 1) * options.batch_size]
            chunk = [instances[i] for i in idx]
            lr = schedule.lr_at(epoch + b / n_batches)
            try:
                with Tape() as tape:
                    loss, values = batch_loss(model, chunk, train=True, rng=rng)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("non-finite loss")
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"{exc} at epoch {epoch}, batch {b}, instances {idx[:20].tolist()}"
                    + ("..." if len(idx) > 20 else "")
                ) from exc
            opt.zero_grad()
            try:
                tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} in backward pass at epoch {epoch}, batch {b}") from exc
            opt.step(lr)
            bad = next((k for k, p in model.params.items() if not np.isfinite(p.data).all()), None)
            if bad is not None:
                raise TrainingDiverged(f"parameter {bad} became non-finite at epoch {epoch}, batch {b}")
            for key in sums:
                sums[key] += values.get(key, 0.0)
        means = {k: v / n_batches for k, v in sums.items()}
        epoch_losses.append(means["loss"])

        last = epoch == options.epochs - 1
        validate = options.validate_every > 0 and ((epoch + 1) % options.validate_every == 0 or last)
        if validate and dataset.valid:
            try:
                report = evaluate(model, dataset.valid, table, filter_index, options.eval_mode, options.eval_batch_size)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} during validation after epoch {epoch}") from exc
            key = _selection_key(report)
            if best_key is None or key > best_key:
                best_key, best_state, best_epoch, best_report = key, model.state_dict(), epoch, report
            row = {"epoch": epoch + 1, "lr": lr, **means}
            row["val_link_mrr"] = report.link["all"].mrr if report.link["all"] else ""
            row["val_rel_mrr"] = report.relation["all"].mrr if report.relation["all"] else ""
            row["val_rmse"] = report.numeric["all"].rmse if report.numeric["all"] else ""
            rows.append(row)
            log.info("epoch %d loss %.5f val link MRR %s", epoch + 1, means["loss"], row["val_link_mrr"])
        elif validate or last:
            rows.append({"epoch": epoch + 1, "lr": lr, **means, "val_link_mrr": "", "val_rel_mrr": "", "val_rmse": ""})
        if progress is not None:
            progress(epoch, means)

    if best_key is None:
        best_state, best_epoch = model.state_dict(), options.epochs - 1
    return TrainResult(model, best_state, best_epoch, best_report, rows, epoch_losses)
