"""Command-line entry point.

Every subcommand that writes files also writes one JSON manifest next to
its outputs recording the command, the fully resolved configuration,
SHA-256 hashes of the input files, the seed, the tool version, and
start/end timestamps. Replaying the recorded configuration and seed
reproduces the outputs bit for bit (with a pinned thread count).

Two file formats are used throughout: JSON for configuration and
reports, CSV for time series and benchmark tables.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from dataclasses import asdict, replace

from . import __version__
from .bench import run_speed_bench, sweep_depth_width, write_bench_csv, write_sweep_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import generate_pretraining_set, read_corpus, write_pretraining_set
from .finetune import (
    TaskDataset,
    TuneProtocol,
    bio_to_entities,
    finetune_task,
    load_ner_tsv,
    load_squad_json,
    load_text_tsv,
)
from .metrics import RankedAnswerList, bioasq_factoid, entity_f1, micro_macro_f1
from .model import PRESETS, ModelConfig, param_count, preset
from .pretrain import PretrainRunConfig, run_pretraining
from .runtime import file_sha256, pin_threads
from .wordpiece import Vocabulary, train_vocabulary


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_manifest(directory, command: str, config: dict, inputs, seed, started_at: str) -> str:
    """One manifest per command invocation, next to the outputs."""
    manifest = {
        "command": command,
        "config": config,
        "input_hashes": {os.fspath(p): file_sha256(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "started_at": started_at,
        "finished_at": _utc_now(),
    }
    path = os.path.join(os.fspath(directory), f"{command}-manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def verify_manifest(path) -> list[str]:
    """Paths whose current hash no longer matches the manifest."""
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    stale = []
    for input_path, recorded in manifest.get("input_hashes", {}).items():
        if file_sha256(input_path) != recorded:
            stale.append(input_path)
    return stale


def _resolved(args: argparse.Namespace) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    return config


def _out_dir_of(path) -> str:
    return os.path.dirname(os.path.abspath(os.fspath(path))) or "."


# ---------------------------------------------------------------------------
# shared flag groups


def _add_shape_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model shape (--preset or explicit flags)")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named model shape")
    g.add_argument("--layers", type=int, help="transformer layer count")
    g.add_argument("--hidden", type=int, help="hidden size")
    g.add_argument("--heads", type=int, help="attention head count")
    g.add_argument("--max-positions", type=int, help="maximum sequence positions")
    g.add_argument("--intermediate-size", type=int, help="FFN width (default 4x hidden)")
    g.add_argument("--dropout", type=float, help="dropout rate override")


def _model_config(args, vocab_size: int | None = None) -> ModelConfig:
    if args.preset:
        config = preset(args.preset)
        if args.dropout is not None:
            config = replace(config, dropout_rate=args.dropout)
        return config
    missing = [
        f"--{name}" for name, value in (
            ("layers", args.layers), ("hidden", args.hidden),
            ("heads", args.heads), ("max-positions", args.max_positions),
        ) if value is None
    ]
    if missing:
        raise CliError(f"missing {', '.join(missing)} (or use --preset)")
    if vocab_size is None:
        raise CliError("missing --vocab-size (or use --preset)")
    return ModelConfig(
        num_layers=args.layers,
        hidden_size=args.hidden,
        num_heads=args.heads,
        vocab_size=vocab_size,
        max_positions=args.max_positions,
        intermediate_size=args.intermediate_size,
        dropout_rate=args.dropout if args.dropout is not None else 0.1,
    )


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _load_protocol(path: str | None) -> TuneProtocol:
    if path is None:
        return TuneProtocol()
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise CliError(f"{path}: protocol file must hold a JSON object")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return TuneProtocol(**kwargs)
    except TypeError as e:
        raise CliError(f"{path}: {e}") from None


def _load_task_splits(task: str, paths: list[str | None]) -> list[TaskDataset | None]:
    """Load splits and align them on one shared label space."""
    if task == "qa":
        return [load_squad_json(p) if p else None for p in paths]
    if task == "ner":
        raw = [load_ner_tsv(p) if p else None for p in paths]
        tags = sorted({
            t for ds in raw if ds for s in ds.examples for t in s.tags if t != "O"
        })
        space = ("O", *tags)
    else:
        raw = [load_text_tsv(p, task) if p else None for p in paths]
        space = tuple(sorted({
            l for ds in raw if ds for ex in ds.examples for l in ex.labels
        }))
    return [TaskDataset(task, ds.examples, space) if ds else None for ds in raw]


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_vocab(args) -> int:
    started = _utc_now()
    with open(args.corpus, encoding="utf-8") as f:
        vocab = train_vocabulary(f, args.target_size, args.min_frequency)
    vocab.save(args.out)
    write_manifest(
        _out_dir_of(args.out), "train-vocab", _resolved(args),
        [args.corpus], None, started,
    )
    print(f"trained {len(vocab)} tokens -> {args.out}")
    return 0


def cmd_build_corpus(args) -> int:
    started = _utc_now()
    vocab = Vocabulary.load(args.vocab)
    docs = read_corpus(args.corpus, pre_segmented=args.pre_segmented)
    instances = generate_pretraining_set(
        docs, vocab, args.max_seq_len,
        dup_factor=args.dup_factor, masking_rate=args.masking_rate,
        max_predictions=args.max_predictions, seed=args.seed,
    )
    count = write_pretraining_set(
        instances, args.out, args.seed, args.masking_rate, args.dup_factor, vocab
    )
    write_manifest(
        _out_dir_of(args.out), "build-corpus", _resolved(args),
        [args.corpus, args.vocab], args.seed, started,
    )
    print(f"wrote {count} instances -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    started = _utc_now()
    vocab = Vocabulary.load(args.vocab)
    config = _model_config(args, vocab_size=len(vocab))
    run_config = PretrainRunConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        max_seq_len=args.max_seq_len,
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        dup_factor=args.dup_factor,
        masking_rate=args.masking_rate,
        log_every=args.log_every,
    )
    os.makedirs(args.out, exist_ok=True)
    run_pretraining(
        config, run_config, args.corpus, args.vocab, args.out,
        resume_from=args.resume, pre_segmented=args.pre_segmented,
    )
    write_manifest(
        args.out, "pretrain", _resolved(args),
        [args.corpus, args.vocab], args.seed, started,
    )
    print(f"pretraining finished -> {os.path.join(args.out, 'final.ckpt')}")
    return 0


def cmd_finetune(args) -> int:
    started = _utc_now()
    vocab = Vocabulary.load(args.vocab)
    checkpoint = load_checkpoint(args.checkpoint)
    protocol = _load_protocol(args.protocol)
    train, dev, test = _load_task_splits(args.task, [args.train, args.dev, args.test])
    stage = load_checkpoint(args.stage_checkpoint) if args.stage_checkpoint else None
    result = finetune_task(
        checkpoint, train, dev, test, vocab,
        protocol=protocol, max_seq_len=args.max_seq_len,
        stage_checkpoint=stage, dropout_rate=args.dropout,
    )
    os.makedirs(args.out, exist_ok=True)
    report = {
        "task": result.task,
        "metric": result.metric,
        "cells": [asdict(c) for c in result.cells],
        "best_batch_size": result.best_batch_size,
        "best_lr": result.best_lr,
        "best_dev_score": result.best_dev_score,
        "seed_scores": list(result.seed_scores),
        "mean_test_score": result.mean_test_score,
        "dropped_examples": result.dropped_examples,
    }
    report_path = os.path.join(args.out, "finetune_report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    model_path = os.path.join(args.out, "best_model.ckpt")
    save_checkpoint(
        result.trained_params, checkpoint.config, model_path,
        extra={"task": result.task, "metric": result.metric,
               "mean_test_score": result.mean_test_score},
    )
    inputs = [p for p in (args.train, args.dev, args.test, args.checkpoint,
                          args.vocab, args.stage_checkpoint, args.protocol) if p]
    write_manifest(
        args.out, "finetune",
        {**_resolved(args), "protocol_resolved": asdict(protocol)},
        inputs, protocol.seeds[0], started,
    )
    print(f"mean test {result.metric}: {result.mean_test_score:.2f} -> {report_path}")
    return 0


def _read_tag_rows(path) -> list[tuple[list[str], list[str]]]:
    """token<TAB>tag sentences without BIO validation (predictions may be
    structurally malformed; entity decoding is lenient about that)."""
    sentences = []
    words: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                if words:
                    sentences.append((words, tags))
                    words, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CliError(f"{path}:{lineno}: expected token<TAB>tag")
            words.append(parts[0])
            tags.append(parts[1])
    if words:
        sentences.append((words, tags))
    return sentences


def _evaluate_ner(gold_path, pred_path) -> dict:
    gold = load_ner_tsv(gold_path)
    pred = _read_tag_rows(pred_path)
    if len(pred) != len(gold):
        raise CliError(
            f"{len(gold)} gold sentences but {len(pred)} predicted"
        )
    gold_entities = []
    pred_entities = []
    for si, (sent, (p_words, p_tags)) in enumerate(zip(gold.examples, pred)):
        if len(p_tags) != len(sent.words):
            raise CliError(
                f"sentence {si}: {len(sent.words)} words but {len(p_tags)} predicted tags"
            )
        gold_entities.extend(bio_to_entities(si, sent.tags))
        pred_entities.extend(bio_to_entities(si, p_tags))
    scores = entity_f1(gold_entities, pred_entities)
    return {
        "task": "ner",
        "precision": scores.precision,
        "recall": scores.recall,
        "f1": scores.f1,
        "gold_entities": len(gold_entities),
        "predicted_entities": len(pred_entities),
    }


def _read_label_rows(path) -> dict[str, tuple[str, ...]]:
    rows = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CliError(f"{path}:{lineno}: expected id<TAB>labels")
            ex_id, field = parts
            if ex_id in rows:
                raise CliError(f"{path}:{lineno}: duplicate id {ex_id!r}")
            rows[ex_id] = tuple(l for l in field.split(",") if l)
    return rows


def _evaluate_labels(task, gold_path, pred_path) -> dict:
    gold = load_text_tsv(gold_path, task)
    pred = _read_label_rows(pred_path)
    missing = [ex.example_id for ex in gold.examples if ex.example_id not in pred]
    if missing:
        raise CliError(f"predictions missing for ids: {', '.join(missing[:5])}")
    if task == "re":
        gold_labels = [ex.labels[0] for ex in gold.examples]
        pred_labels = []
        for ex in gold.examples:
            labels = pred[ex.example_id]
            if len(labels) != 1:
                raise CliError(f"id {ex.example_id!r}: need exactly one predicted label")
            pred_labels.append(labels[0])
        multi = False
    else:
        gold_labels = [set(ex.labels) for ex in gold.examples]
        pred_labels = [set(pred[ex.example_id]) for ex in gold.examples]
        multi = True
    space = tuple(sorted(set(gold.label_space) | {l for p in pred.values() for l in p}))
    return {
        "task": task,
        "micro_f1": micro_macro_f1(gold_labels, pred_labels, space, "micro", multi_label=multi),
        "macro_f1": micro_macro_f1(gold_labels, pred_labels, space, "macro", multi_label=multi),
        "examples": len(gold),
    }


def _evaluate_qa(gold_path, pred_path) -> dict:
    gold = load_squad_json(gold_path)
    with open(pred_path, encoding="utf-8") as f:
        pred = json.load(f)
    if not isinstance(pred, dict):
        raise CliError(f"{pred_path}: expected a JSON object mapping id -> answers")
    items = []
    for ex in gold.examples:
        candidates = pred.get(ex.qid, [])
        try:
            items.append(RankedAnswerList(tuple(candidates), frozenset(ex.answers)))
        except ValueError as e:
            raise CliError(f"question {ex.qid!r}: {e}") from None
    scores = bioasq_factoid(items)
    return {
        "task": "qa",
        "strict_accuracy": scores.strict_accuracy,
        "lenient_accuracy": scores.lenient_accuracy,
        "mrr": scores.mrr,
        "questions": len(gold),
    }


def cmd_evaluate(args) -> int:
    started = _utc_now()
    if args.task == "ner":
        report = _evaluate_ner(args.gold, args.pred)
    elif args.task in ("re", "dc"):
        report = _evaluate_labels(args.task, args.gold, args.pred)
    else:
        report = _evaluate_qa(args.gold, args.pred)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        write_manifest(
            _out_dir_of(args.out), "evaluate", _resolved(args),
            [args.gold, args.pred], None, started,
        )
    return 0


def cmd_bench(args) -> int:
    started = _utc_now()
    configs = {name: preset(name) for name in args.configs}
    report = run_speed_bench(
        configs, args.phase,
        seq_len=args.seq_len, repetitions=args.reps,
        base=args.base, threads=args.threads, seed=args.seed,
    )
    out = args.out or f"bench_{args.phase}.csv"
    write_bench_csv(report, out)
    write_manifest(
        _out_dir_of(out), "bench", _resolved(args), [], args.seed, started,
    )
    for result, speedup in report.rows:
        flag = "" if result.stable else "  [unstable]"
        print(
            f"{result.config_name:>16}  batch {result.batch_size:>2}  "
            f"{result.examples_per_sec:8.2f} ex/s  x{speedup:.2f}{flag}"
        )
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    started = _utc_now()
    train, dev = _load_task_splits(args.task, [args.train, args.dev])[:2]
    protocol = _load_protocol(args.protocol)
    pretrain_config = PretrainRunConfig(
        steps=args.steps,
        batch_size=args.pretrain_batch_size,
        max_seq_len=args.pretrain_seq_len,
        lr=args.pretrain_lr,
        seed=args.seed,
        dup_factor=args.dup_factor,
    )
    os.makedirs(args.out, exist_ok=True)
    report = sweep_depth_width(
        args.depths, args.widths, train, dev,
        args.corpus, args.vocab, args.out,
        budget=args.budget,
        pretrain_config=pretrain_config,
        protocol=protocol,
        max_seq_len=args.max_seq_len,
        seed=args.seed,
    )
    csv_path = os.path.join(args.out, "sweep.csv")
    write_sweep_csv(report, csv_path)
    inputs = [p for p in (args.train, args.dev, args.corpus, args.vocab, args.protocol) if p]
    write_manifest(args.out, "sweep", _resolved(args), inputs, args.seed, started)
    for row in report.rows:
        score = "diverged" if row.dev_score is None else f"{row.dev_score:.2f}"
        print(f"L={row.depth:<3} H={row.width:<5} params={row.params:<12} dev={score}")
    for (a, b, rel) in report.iso_pairs:
        print(f"iso-parameter pair: L{a[0]}/H{a[1]} vs L{b[0]}/H{b[1]} ({100 * rel:.1f}% apart)")
    print(f"wrote {csv_path}")
    return 0


def _approx_label(n: int) -> str:
    if n >= 1_000_000:
        return f"≈{round(n / 1_000_000)}M"
    return f"≈{round(n / 1_000)}K"


def cmd_param_count(args) -> int:
    config = _model_config(args, vocab_size=args.vocab_size)
    n = param_count(config, include_mlm_nsp_heads=args.include_heads)
    name = args.preset or f"L{config.num_layers}/H{config.hidden_size}"
    print(f"{name}: {n:,} parameters ({_approx_label(n)})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bertforge",
        description="Compact BERT-style encoders: vocabulary training, "
        "pretraining, fine-tuning, evaluation, and speed benchmarks.",
        epilog="File formats: JSON for configs and reports, CSV for metrics "
        "time series and benchmark tables. FORGE_THREADS pins BLAS threads.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-vocab", help="train a cased WordPiece vocabulary")
    p.add_argument("--corpus", required=True, help="plain-text corpus file")
    p.add_argument("--out", required=True, help="vocabulary file to write")
    p.add_argument("--target-size", type=int, required=True)
    p.add_argument("--min-frequency", type=int, default=2)
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("build-corpus", help="materialize masked pretraining instances")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="binary instance file to write")
    p.add_argument("--max-seq-len", type=int, required=True)
    p.add_argument("--dup-factor", type=int, default=20)
    p.add_argument("--masking-rate", type=float, default=0.15)
    p.add_argument("--max-predictions", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pre-segmented", action="store_true",
                   help="corpus lines are already one sentence each")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("pretrain", help="run MLM+NSP pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--max-seq-len", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--dup-factor", type=int, default=20)
    p.add_argument("--masking-rate", type=float, default=0.15)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--pre-segmented", action="store_true")
    _add_shape_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="grid-search fine-tuning with seed averaging")
    p.add_argument("--task", required=True, choices=("ner", "re", "dc", "qa"))
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None, help="held out from train when omitted")
    p.add_argument("--test", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--protocol", default=None,
                   help="JSON file overriding the default tuning protocol")
    p.add_argument("--max-seq-len", type=int, default=None)
    p.add_argument("--stage-checkpoint", default=None,
                   help="initialize from this fine-tuned checkpoint instead")
    p.add_argument("--dropout", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a prediction file against gold")
    p.add_argument("--task", required=True, choices=("ner", "re", "dc", "qa"))
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="throughput benchmark over model presets")
    p.add_argument("--phase", required=True, choices=("inference", "train"))
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--configs", type=lambda s: tuple(x for x in s.split(",") if x),
                   default=("bert-base", "bioformer-8L", "bioformer-16L"))
    p.add_argument("--base", default="bert-base")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default bench_<phase>.csv)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="depth-vs-width sweep on a toy task")
    p.add_argument("--task", required=True, choices=("ner", "qa"))
    p.add_argument("--depths", type=_int_list, required=True, help="e.g. 2,4,8")
    p.add_argument("--widths", type=_int_list, required=True, help="e.g. 32,64")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--budget", type=int, required=True,
                   help="maximum parameters per cell")
    p.add_argument("--steps", type=int, default=50, help="pretraining steps per cell")
    p.add_argument("--pretrain-batch-size", type=int, default=8)
    p.add_argument("--pretrain-seq-len", type=int, default=64)
    p.add_argument("--pretrain-lr", type=float, default=1e-3)
    p.add_argument("--dup-factor", type=int, default=2)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--protocol", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("param-count", help="exact parameter count for a shape")
    _add_shape_flags(p)
    p.add_argument("--vocab-size", type=int, default=None,
                   help="embedding rows when not using a preset")
    p.add_argument("--include-heads", action="store_true",
                   help="count the MLM/NSP pretraining heads too")
    p.set_defaults(func=cmd_param_count)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    pin_threads()  # honors FORGE_THREADS when set
    try:
        return args.func(args)
    except KeyboardInterrupt:
        raise
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
