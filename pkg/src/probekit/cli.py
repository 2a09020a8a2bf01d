"""Command-line entry point for reproducible probing experiments.

Every command that produces results writes them into --out together with a
manifest (config echo, seed list, version string, input digests). Metric files
contain no timestamps, so re-running with identical inputs and flags
reproduces them byte for byte; timestamps live only in the manifest.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

from . import __version__, corpus, ner_probe, nli_probe, relation_analysis, trainer
from .embedstore import read_store
from .errors import ConfigError, ProbekitError
from .relation_analysis import knn_same_type, mean_nn_reports, compare_nn_reports


class _UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 with usage on stderr instead of argparse's exit 2
        raise _UsageError(message, self)


def probe_threads() -> int:
    """Worker cap from PROBE_THREADS; 0 means auto, unset means single-threaded."""
    raw = os.environ.get("PROBE_THREADS", "")
    if not raw:
        return 1
    value = int(raw)
    if value < 0:
        raise ConfigError(f"PROBE_THREADS must be >= 0, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _version_string() -> str:
    """git-describe-style version when running from a checkout, else the package version."""
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"probekit-{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"probekit-{__version__}"


def _write_manifest(out_dir: Path, command: str, argv, config_echo: dict | None, seeds, inputs):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config_echo,
        "seeds": list(seeds) if seeds is not None else None,
        "version": _version_string(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metrics(out_dir: Path, records: list[dict], lines: list[str]) -> None:
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out_dir / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--config", help="key = value file mirroring the training config")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--seeds", help="space/comma separated run seeds")
    p.add_argument("--precision", choices=["float64"])
    p.add_argument("--shuffle", choices=["true", "false"])


def _train_config(args) -> trainer.TrainConfig:
    overrides = {
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
        "seeds": tuple(int(s) for s in args.seeds.replace(",", " ").split())
        if args.seeds
        else None,
        "precision": args.precision,
        "shuffle": {"true": True, "false": False}[args.shuffle] if args.shuffle else None,
    }
    return trainer.load_config(args.config, **overrides)


def _build_parser() -> _Parser:
    parser = _Parser(prog="probekit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ner", parents=[], help="train the NER probe over fixed embeddings")
    p.add_argument("--train", required=True)
    p.add_argument("--train-alt")
    p.add_argument("--dev", required=True)
    p.add_argument("--dev-alt")
    p.add_argument("--store", required=True)
    p.add_argument("--dev-store", help="defaults to --store")
    p.add_argument("--out", required=True)
    p.add_argument("--hidden-sizes", default="512 512")
    p.add_argument("--activation", default="relu", choices=["relu", "tanh"])
    p.add_argument("--no-bio-constraint", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("eval-ner", help="evaluate NER checkpoints (entity F1)")
    p.add_argument("--test", required=True)
    p.add_argument("--test-alt")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-nli", help="train the NLI probe over fixed embeddings")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--dev-store", help="defaults to --store")
    p.add_argument("--out", required=True)
    p.add_argument("--rank", type=int, default=128, help="relation representation size")
    p.add_argument("--untied", action="store_true", help="separate premise/hypothesis mixes")
    p.add_argument("--no-bias", action="store_true", help="drop the label-layer bias")
    _add_train_flags(p)

    p = sub.add_parser("eval-nli", help="evaluate NLI checkpoints (accuracy)")
    p.add_argument("--test", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--annotations", help="restrict an extra metric to annotated pairs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze-nn", help="same-type nearest-neighbor proportions")
    p.add_argument("--reps", action="append", required=True, help="relation-rep store (repeatable)")
    p.add_argument("--types", action="append", required=True, help="sidecar per --reps")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--metric", default="cosine", choices=["cosine", "euclidean"])
    p.add_argument("--compare-reps", action="append", help="second scheme for z-tests")
    p.add_argument("--compare-types", action="append")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-relations", help="extract relation reps at annotated pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-vectors", help="dump relation reps as a TSV table")
    p.add_argument("--reps", required=True)
    p.add_argument("--types", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("store-info", help="summarize a PTE embedding store")
    p.add_argument("--store", required=True)
    return parser


def _cmd_train_ner(args, argv) -> int:
    train_sents, _ = corpus.parse_tagged_corpus(args.train, args.train_alt)
    dev_sents, dev_gold = corpus.parse_tagged_corpus(args.dev, args.dev_alt)
    store = read_store(args.store)
    dev_store = read_store(args.dev_store) if args.dev_store else store
    config = _train_config(args)
    hidden = tuple(int(h) for h in args.hidden_sizes.replace(",", " ").split())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tags = ner_probe.TagVocabulary.from_sentences(train_sents, dev_sents)
    first = store[train_sents[0].id]

    records, lines = [], [f"NER probe training ({len(train_sents)} train / {len(dev_sents)} dev)"]
    per_seed = []
    for seed in config.seeds:
        model = ner_probe.init_model(
            tags,
            num_layers=first.num_layers,
            dim=first.dim,
            hidden_sizes=hidden,
            activation=args.activation,
            seed=seed,
            constrain_decoding=not args.no_bio_constraint,
        )
        model, history = ner_probe.train(
            model, train_sents, store, dev_sents, dev_store, config,
            seed=seed, dev_gold=dev_gold,
        )
        ckpt = out / f"checkpoint-seed{seed}.ckpt"
        ner_probe.save(model, ckpt, {"seed": seed, "config": config.as_dict()})
        best = max((h["dev_metric"] for h in history), default=0.0)
        metrics = {"seed": seed, "dev_f1": best, "epochs_run": len(history)}
        per_seed.append(metrics)
        records.append({"record": "seed", **metrics})
        lines.append(f"seed {seed}: best dev F1 {best:.4f} after {len(history)} epochs")
    mean = trainer.mean_metrics(per_seed)
    records.append({"record": "mean", **mean})
    lines.append(f"mean dev F1 {mean['dev_f1']:.4f}")

    _write_metrics(out, records, lines)
    inputs = [args.train, args.dev, args.store] + [
        p for p in (args.train_alt, args.dev_alt, args.dev_store) if p
    ]
    _write_manifest(out, "train-ner", argv, config.as_dict(), config.seeds, inputs)
    return 0


def _cmd_eval_ner(args, argv) -> int:
    test_sents, test_gold = corpus.parse_tagged_corpus(args.test, args.test_alt)
    store = read_store(args.store)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = probe_threads()

    records, lines, per_seed = [], ["NER probe evaluation"], []
    for ckpt in args.checkpoint:
        model, meta = ner_probe.load(ckpt)
        predictions = ner_probe.decode_corpus(model, test_sents, store, threads=threads)
        report = ner_probe.evaluate(
            predictions, test_gold, sentence_ids=[s.id for s in test_sents]
        )
        metrics = {"seed": meta.get("seed"), **report.as_dict()}
        per_seed.append(metrics)
        records.append({"record": "checkpoint", "checkpoint": Path(ckpt).name, **metrics})
        lines.append(
            f"{Path(ckpt).name}: P {report.precision:.4f} R {report.recall:.4f} "
            f"F1 {report.f1:.4f} (tp {report.tp} fp {report.fp} fn {report.fn})"
        )
    mean = trainer.mean_metrics(per_seed)
    records.append({"record": "mean", **mean})
    lines.append(f"mean F1 {mean['f1']:.4f}")

    _write_metrics(out, records, lines)
    inputs = [args.test, args.store, *args.checkpoint] + ([args.test_alt] if args.test_alt else [])
    _write_manifest(out, "eval-ner", argv, None, [m.get("seed") for m in per_seed], inputs)
    return 0


def _cmd_train_nli(args, argv) -> int:
    train_pairs = corpus.parse_nli_corpus(args.train)
    dev_pairs = corpus.parse_nli_corpus(args.dev)
    store = read_store(args.store)
    dev_store = read_store(args.dev_store) if args.dev_store else store
    config = _train_config(args)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first = store[f"{train_pairs[0].id}/p"]

    records, lines = [], [f"NLI probe training ({len(train_pairs)} train / {len(dev_pairs)} dev)"]
    per_seed = []
    for seed in config.seeds:
        model = nli_probe.init_model(
            num_layers=first.num_layers,
            dim=first.dim,
            rank=args.rank,
            seed=seed,
            tied=not args.untied,
            use_bias=not args.no_bias,
        )
        model, history = nli_probe.train(
            model, train_pairs, store, dev_pairs, dev_store, config, seed=seed
        )
        ckpt = out / f"checkpoint-seed{seed}.ckpt"
        nli_probe.save(model, ckpt, {"seed": seed, "config": config.as_dict()})
        best = max((h["dev_metric"] for h in history), default=0.0)
        metrics = {"seed": seed, "dev_accuracy": best, "epochs_run": len(history)}
        per_seed.append(metrics)
        records.append({"record": "seed", **metrics})
        lines.append(f"seed {seed}: best dev accuracy {best:.4f} after {len(history)} epochs")
    mean = trainer.mean_metrics(per_seed)
    records.append({"record": "mean", **mean})
    lines.append(f"mean dev accuracy {mean['dev_accuracy']:.4f}")

    _write_metrics(out, records, lines)
    inputs = [args.train, args.dev, args.store] + ([args.dev_store] if args.dev_store else [])
    _write_manifest(out, "train-nli", argv, config.as_dict(), config.seeds, inputs)
    return 0


def _cmd_eval_nli(args, argv) -> int:
    test_pairs = corpus.parse_nli_corpus(args.test)
    store = read_store(args.store)
    annotated_ids = None
    if args.annotations:
        annotations = corpus.parse_relation_annotations(args.annotations, test_pairs)
        annotated_ids = [a.pair_id for a in annotations]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    gold = {p.id: p.label for p in test_pairs}
    records, lines, per_seed = [], ["NLI probe evaluation"], []
    for ckpt in args.checkpoint:
        model, meta = nli_probe.load(ckpt)
        predictions = {p.id: nli_probe.predict_pair(model, p, store) for p in test_pairs}
        acc = sum(1 for p in test_pairs if predictions[p.id] == p.label) / len(test_pairs)
        metrics = {"seed": meta.get("seed"), "accuracy": acc, "n_test": len(test_pairs)}
        if annotated_ids:
            metrics["subset_accuracy"] = relation_analysis.subset_accuracy(
                predictions, annotated_ids, gold
            )
        per_seed.append(metrics)
        records.append({"record": "checkpoint", "checkpoint": Path(ckpt).name, **metrics})
        line = f"{Path(ckpt).name}: accuracy {acc:.4f}"
        if "subset_accuracy" in metrics:
            line += f", subset accuracy {metrics['subset_accuracy']:.4f}"
        lines.append(line)
    mean = trainer.mean_metrics(per_seed)
    records.append({"record": "mean", **mean})
    lines.append(f"mean accuracy {mean['accuracy']:.4f}")

    _write_metrics(out, records, lines)
    inputs = [args.test, args.store, *args.checkpoint] + (
        [args.annotations] if args.annotations else []
    )
    _write_manifest(out, "eval-nli", argv, None, [m.get("seed") for m in per_seed], inputs)
    return 0


def _load_rep_sets(rep_paths, type_paths, reps_flag: str, types_flag: str):
    if len(rep_paths) != len(type_paths):
        raise ConfigError(f"need one {types_flag} per {reps_flag}")
    return [nli_probe.read_relation_reps(r, t) for r, t in zip(rep_paths, type_paths)]


def _cmd_analyze_nn(args, argv) -> int:
    rep_sets = _load_rep_sets(args.reps, args.types, "--reps", "--types")
    reports = [knn_same_type(reps, k=args.k, metric=args.metric) for reps in rep_sets]
    mean = mean_nn_reports(reports)

    comparison = None
    if args.compare_reps:
        compare_sets = _load_rep_sets(
            args.compare_reps, args.compare_types or [], "--compare-reps", "--compare-types"
        )
        compare_mean = mean_nn_reports(
            [knn_same_type(reps, k=args.k, metric=args.metric) for reps in compare_sets]
        )
        comparison = compare_nn_reports(mean, compare_mean)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    names = [Path(p).stem for p in args.reps]
    if len(set(names)) < len(names):  # same file name from different run dirs
        names = [f"{Path(p).parent.name}/{Path(p).stem}" for p in args.reps]
    all_types = sorted({t for r in reports for t in r.per_type})
    width = max([len(t) for t in all_types] + [len("relation type")]) + 2
    lines = [f"NN same-type proportions (k={args.k}, metric={args.metric})"]
    header = "relation type".ljust(width) + "".join(n[:12].ljust(14) for n in names)
    header += "mean".ljust(14) if len(reports) > 1 else ""
    header += "z vs compare  p" if comparison else ""
    lines.append(header)
    for t in all_types:
        row = t.ljust(width)
        row += "".join(f"{r.per_type.get(t, float('nan')):.4f}".ljust(14) for r in reports)
        if len(reports) > 1:
            row += f"{mean.per_type[t]:.4f}".ljust(14)
        if comparison and t in comparison:
            z, p_value = comparison[t]
            row += f"{z:+.3f}        {p_value:.4f}"
        lines.append(row)
    row = "All".ljust(width) + "".join(f"{r.overall:.4f}".ljust(14) for r in reports)
    if len(reports) > 1:
        row += f"{mean.overall:.4f}".ljust(14)
    lines.append(row)

    records = [
        {"record": "report", "name": name, **report.as_dict()}
        for name, report in zip(names, reports)
    ]
    records.append({"record": "mean", **mean.as_dict()})
    if comparison:
        records.append(
            {
                "record": "z_test",
                "per_type": {t: {"z": z, "p": p} for t, (z, p) in comparison.items()},
            }
        )

    with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))

    inputs = [*args.reps, *args.types, *(args.compare_reps or []), *(args.compare_types or [])]
    _write_manifest(out, "analyze-nn", argv, {"k": args.k, "metric": args.metric}, None, inputs)
    return 0


def _cmd_export_relations(args, argv) -> int:
    model, _ = nli_probe.load(args.checkpoint)
    pairs = corpus.parse_nli_corpus(args.pairs)
    annotations = corpus.parse_relation_annotations(args.annotations, pairs)
    store = read_store(args.store)
    reps = nli_probe.extract_relation_reps(model, annotations, store)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nli_probe.write_relation_reps(reps, out / "relreps.pte", out / "relreps.types.jsonl")
    _write_manifest(
        out,
        "export-relations",
        argv,
        None,
        None,
        [args.checkpoint, args.pairs, args.annotations, args.store],
    )
    print(f"wrote {len(reps)} relation representations to {out / 'relreps.pte'}")
    return 0


def _cmd_export_vectors(args, argv) -> int:
    reps = nli_probe.read_relation_reps(args.reps, args.types)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    relation_analysis.export_vectors(
        [r.vector for r in reps],
        out / "vectors.tsv",
        ids=[f"{r.pair_id}:{r.premise_index}:{r.hypothesis_index}" for r in reps],
        labels=[r.relation_type for r in reps],
        tags=[
            {
                "pair_id": r.pair_id,
                "premise_index": str(r.premise_index),
                "hypothesis_index": str(r.hypothesis_index),
            }
            for r in reps
        ],
    )
    _write_manifest(out, "export-vectors", argv, None, None, [args.reps, args.types])
    print(f"wrote {len(reps)} vectors to {out / 'vectors.tsv'}")
    return 0


def _cmd_store_info(args, argv) -> int:
    store = read_store(args.store)
    records = store.records()
    print(f"store: {args.store}")
    print(f"records: {len(records)}")
    if records:
        layer_counts = sorted({r.num_layers for r in records})
        print(f"layer counts (K): {layer_counts}")
        dims: dict[int, int] = {}
        for r in records:
            dims[r.dim] = dims.get(r.dim, 0) + 1
        print("dim histogram:")
        for d in sorted(dims):
            print(f"  D={d}: {dims[d]} records")
        lengths = [r.seq_len for r in records]
        print(f"sequence lengths: min {min(lengths)} max {max(lengths)}")
    return 0


_COMMANDS = {
    "train-ner": _cmd_train_ner,
    "eval-ner": _cmd_eval_ner,
    "train-nli": _cmd_train_nli,
    "eval-nli": _cmd_eval_nli,
    "analyze-nn": _cmd_analyze_nn,
    "export-relations": _cmd_export_relations,
    "export-vectors": _cmd_export_vectors,
    "store-info": _cmd_store_info,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args, argv)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProbekitError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
