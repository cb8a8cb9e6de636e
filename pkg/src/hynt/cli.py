"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``predict``, ``inspect``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError
from .batching import HEAD, QUAL_RELATION, QUAL_VALUE, RELATION, TAIL, MaskSpec
from .checkpoint import load_model, save_model
from .config import ConfigError, RunConfig, apply_override, load_config
from .evaluation import SCOPES, build_filter_index, evaluate
from .ingest import (
    NUMERIC_SIGIL,
    FactFileError,
    NormalizationTable,
    SyntheticSpec,
    compute_normalization,
    load_dataset,
    normalize_dataset,
    parse_numeric_literal,
    save_dataset,
    synthetic_dataset,
)
from .kg import Dataset, Discrete, HyperFact, Numeric, PrimaryTriplet, Qualifier, Vocabulary
from .training import LOG_COLUMNS, NO_MASK_CHOICES, TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

log = logging.getLogger("hynt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def _ratios(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(x) for x in text.replace(":", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split ratios {text!r}") from None
    total = sum(parts)
    if len(parts) != 3 or total <= 0 or min(parts) < 0:
        raise argparse.ArgumentTypeError("split needs three non-negative ratios")
    return tuple(p / total for p in parts)


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        num_entities=args.entities,
        num_discrete_relations=args.discrete_relations,
        num_numeric_relations=args.numeric_relations,
        num_facts=args.facts,
        max_qualifiers=args.max_qualifiers,
        seed=args.seed,
        noise_scale=args.noise,
    )
    try:
        ds = synthetic_dataset(spec, ratios=args.split, split_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        save_dataset(ds, out)
        with open(out / "spec.txt", "w", encoding="utf-8", newline="\n") as fh:
            for key, value in vars(spec).items():
                if key != "laws":
                    fh.write(f"{key}={value}\n")
            fh.write("split=" + ",".join(repr(r) for r in args.split) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc.strerror}") from None
    print(f"wrote {len(ds.train)}/{len(ds.valid)}/{len(ds.test)} train/valid/test facts to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    for assignment in args.set or ():
        apply_override(config, assignment)
    if args.data is not None:
        config.data.dir = args.data
    if args.out is not None:
        config.run.output = args.out
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.seed is not None:
        config.train.seed = args.seed
    if args.dim is not None:
        config.model.dim = args.dim
        config.model.context_ffn = config.model.prediction_ffn = 2 * args.dim
    if args.prediction_head is not None:
        config.model.prediction_head = args.prediction_head
    if args.encoding is not None:
        config.model.encoding = args.encoding
    if args.no_mask:
        config.train.no_mask = tuple(dict.fromkeys(config.train.no_mask + tuple(args.no_mask)))
    config.validate()
    return config


def _load(directory, vocab=None) -> Dataset:
    try:
        ds = load_dataset(directory, vocab)
    except (FactFileError, OSError) as exc:
        raise DataError(str(exc)) from None
    bad = ds.violations()
    if bad:
        split, i, problems = bad[0]
        raise DataError(f"{directory}/{split}.txt: fact {i + 1}: {'; '.join(problems)} ({len(bad)} invalid facts)")
    return ds


def _write_log(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_training(config: RunConfig) -> tuple[Path, object]:
    """Train per ``config``; writes checkpoints, the CSV log and the resolved config."""
    ds = _load(config.data.dir)
    if not ds.train:
        raise DataError(f"{config.data.dir}: empty train split")
    table = compute_normalization(ds.train)
    if config.data.normalize:
        ds = normalize_dataset(ds, table)
    else:
        table = NormalizationTable()
    out = Path(config.run.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.dumps(), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc.strerror}") from None

    def progress(epoch, means):
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.train.epochs, means["loss"])

    result = train(ds, config.model, config.train, table, progress)
    save_model(out / "last", result.model, ds.vocabulary, table)
    save_model(out / "best", result.best_model(), ds.vocabulary, table)
    _write_log(out / "log.csv", result.log)
    return out, result


def cmd_train(args) -> int:
    config = resolve_config(args)
    out, result = run_training(config)
    print(f"best epoch {result.best_epoch + 1}; final train loss {result.epoch_losses[-1]:.6g}")
    print(f"checkpoints in {out / 'best'} and {out / 'last'}; log in {out / 'log.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    model, vocab, table = _load_checkpoint(args.checkpoint)
    ds = _load(args.data, vocab)
    if table.ranges and table.applied:
        ds = normalize_dataset(ds, table)
    facts = ds.split(args.split)
    if not facts:
        raise DataError(f"split {args.split!r} is empty")
    filt = build_filter_index(ds.all_facts()) if args.mode == "filtered" else None
    scopes = SCOPES if args.scope == "both" else (args.scope,)
    report = evaluate(model, facts, table, filt, args.mode, scopes=scopes)
    text = report.to_text(vocab)
    print(text, end="")
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.csv").write_text(report.to_csv(vocab), encoding="utf-8")
        Path(f"{prefix}.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------


def parse_query(text: str, vocab: Vocabulary, table: NormalizationTable) -> tuple[HyperFact, MaskSpec]:
    """Parse ``h r t [q v ...]`` with exactly one ``?`` (or ``#?`` for a numeric value).

    Known numeric values are normalized with ``table`` before the forward pass.
    """
    tokens = text.split()
    if len(tokens) < 3 or (len(tokens) - 3) % 2:
        raise UsageError(f"query needs 3 + 2k tokens, got {len(tokens)}")
    holes = [i for i, tok in enumerate(tokens) if tok in ("?", NUMERIC_SIGIL + "?")]
    if len(holes) != 1:
        raise UsageError(f"query needs exactly one '?', found {len(holes)}")
    hole = holes[0]
    is_rel_pos = hole == 1 or (hole >= 3 and hole % 2 == 1)
    numeric_hole = tokens[hole] == NUMERIC_SIGIL + "?"
    if hole == 0 and numeric_hole:
        raise UsageError("the head cannot be numeric")
    if is_rel_pos and numeric_hole:
        raise UsageError("a relation cannot be numeric")

    def relation(tok):
        if tok == "?":
            return 0
        rid = vocab.relations.get(tok)
        if rid is None:
            raise DataError(f"unknown relation {tok!r}")
        return rid

    def entity(tok, rel):
        if tok == "?":
            return Discrete(0)
        if tok == NUMERIC_SIGIL + "?":
            return Numeric(0.0)
        if tok.startswith(NUMERIC_SIGIL):
            try:
                value = parse_numeric_literal(tok[1:])
            except ValueError as exc:
                raise DataError(str(exc)) from None
            if rel in table.ranges and table.applied:
                value = table.normalize(rel, value)
            return Numeric(value)
        eid = vocab.entities.get(tok)
        if eid is None:
            raise DataError(f"unknown entity {tok!r}")
        return Discrete(eid)

    rel = relation(tokens[1])
    triplet = PrimaryTriplet(entity(tokens[0], rel), rel, entity(tokens[2], rel))
    quals = []
    for i in range(3, len(tokens), 2):
        q = relation(tokens[i])
        quals.append(Qualifier(q, entity(tokens[i + 1], q)))
    fact = HyperFact(triplet, tuple(quals))
    if hole < 3:
        mask = MaskSpec((HEAD, RELATION, TAIL)[hole])
    else:
        mask = MaskSpec(QUAL_RELATION if hole % 2 == 1 else QUAL_VALUE, (hole - 3) // 2)
    return fact, mask


def cmd_predict(args) -> int:
    model, vocab, table = _load_checkpoint(args.checkpoint)
    fact, mask = parse_query(args.query, vocab, table)
    out = model.forward_fact(fact, mask)
    if isinstance(out, float):
        rel = mask.governing_relation(fact)
        value = table.denormalize(rel, out) if rel in table.ranges and table.applied else out
        print(repr(value))
        return EXIT_OK
    names = vocab.relations if mask.slot in (RELATION, QUAL_RELATION) else vocab.entities
    order = np.argsort(-out, kind="stable")[: args.top]
    for idx in order:
        print(f"{names.name(int(idx))}\t{out[idx]:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# inspect
# --------------------------------------------------------------------------


def dataset_statistics(ds: Dataset) -> list[tuple[str, int]]:
    """Counts laid out like the usual HN-KG summary table.

    Numeric entities are distinct numeric values; triplet and qualifier
    counts are over distinct triplets and distinct (relation, value) pairs.
    """
    vocab = ds.vocabulary
    facts = ds.all_facts()
    numeric_values = set()
    triplets, qualifiers = set(), set()
    for f in facts:
        t = f.triplet
        triplets.add(t)
        if isinstance(t.tail, Numeric):
            numeric_values.add(t.tail.value)
        for q in f.qualifiers:
            qualifiers.add(q)
            if isinstance(q.value, Numeric):
                numeric_values.add(q.value.value)
    n_rel_num = sum(1 for r in range(vocab.num_relations) if vocab.is_numeric(r))
    with_q = sum(1 for f in facts if f.qualifiers)
    tri_num = sum(1 for t in triplets if isinstance(t.tail, Numeric))
    qual_num = sum(1 for q in qualifiers if isinstance(q.value, Numeric))
    return [
        ("|V_D|", vocab.num_entities),
        ("|V_N|", len(numeric_values)),
        ("|V|", vocab.num_entities + len(numeric_values)),
        ("|R_D|", vocab.num_relations - n_rel_num),
        ("|R_N|", n_rel_num),
        ("|R|", vocab.num_relations),
        ("|E|", len(facts)),
        ("  w/ qual.", with_q),
        ("  w/o qual.", len(facts) - with_q),
        ("|E_tri_D|", len(triplets) - tri_num),
        ("|E_tri_N|", tri_num),
        ("|E_tri|", len(triplets)),
        ("|E_qual_D|", len(qualifiers) - qual_num),
        ("|E_qual_N|", qual_num),
        ("|E_qual|", len(qualifiers)),
    ]


def cmd_inspect(args) -> int:
    ds = _load(args.data)
    stats = dataset_statistics(ds)
    width = max(len(k) for k, _ in stats)
    groups = {"|V|", "|R|", "w/o qual.", "|E_tri|"}
    for key, value in stats:
        print(f"{key:<{width}}  {value:>9,}")
        if key.strip() in groups:
            print("-" * (width + 11))
    print(f"train/valid/test: {len(ds.train)}/{len(ds.valid)}/{len(ds.test)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hynt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entities", type=int, default=50)
    g.add_argument("--discrete-relations", type=int, default=7)
    g.add_argument("--numeric-relations", type=int, default=3, help="includes the point_in_time relation")
    g.add_argument("--facts", type=int, default=500)
    g.add_argument("--max-qualifiers", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--split", type=_ratios, default=(0.8, 0.1, 0.1), help="train,valid,test ratios")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--dim", type=int, help="model width; feed-forward widths follow as 2*dim")
    t.add_argument("--prediction-head", choices=("transformer", "linear"))
    t.add_argument("--encoding", choices=("projection", "hadamard"))
    t.add_argument("--no-mask", action="append", choices=NO_MASK_CHOICES, help="withhold a mask type (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "valid", "test"), default="test")
    e.add_argument("--scope", choices=("tri", "all", "both"), default="both")
    e.add_argument("--mode", choices=("raw", "filtered"), default="filtered")
    e.add_argument("--out", help="write PREFIX.csv and PREFIX.txt")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="answer one query")
    p.add_argument("checkpoint")
    p.add_argument("query", help="fact with one '?' slot, '#?' for a numeric value")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="print dataset statistics")
    i.add_argument("data")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        # non-finite values are detected and reported explicitly
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"hynt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"hynt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"hynt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"hynt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
