"""``krisplite`` command line: ingest, gen, detect, retrieve, train, eval, analyze.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical abort.
Results go to stdout (JSON or TSV); the resolved config and diagnostics go
to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import featstore as fs
from . import kgstore as kg
from . import models
from . import pipeline as pl
from . import synthvqa as sv
from .tensorcore import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _mix(text: str) -> dict[str, float]:
    out = {}
    for part in _csv_list(text):
        name, _, value = part.partition("=")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad mix entry {part!r}; use type=weight") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="krisplite", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="parse a ConceptNet assertions dump into an index", formatter_class=fmt)
    p.add_argument("--edges", required=True, help="tab-separated ConceptNet 5 assertions file")
    p.add_argument("--lang", default="en", help="keep edges whose endpoints are both in this language")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.triples.tsv and <out>.meta.json")
    p.add_argument("--max-errors", type=int, default=20, help="malformed rows echoed to stderr")

    p = sub.add_parser("gen", help="generate the synthetic VQA benchmark", formatter_class=fmt)
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--scenes", type=int, default=2000, help="number of scenes")
    p.add_argument("--questions-per-scene", type=int, default=3, help="questions per scene")
    p.add_argument("--mix", type=_mix, default=None,
                   help="question-type weights, e.g. existence=0.35,counting=0.25,color=0.25,spatial=0.15 "
                        "(default: that mix)")
    p.add_argument("--noise", type=float, default=sv.DEFAULT_NOISE, help="per-component image noise")
    p.add_argument("--bind", type=float, default=sv.DEFAULT_BIND, help="strength of bound colour/column codes")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("detect", help="zero-shot concepts for one image vector", formatter_class=fmt)
    p.add_argument("--image-id", required=True, help="row name in the image table (a scene id)")
    p.add_argument("--labels", required=True, help="label embedding table (word2vec text)")
    p.add_argument("--images", default=None, help="image embedding table; default <data>/images.vec")
    p.add_argument("--data", default=None, help="dataset directory holding images.vec")
    p.add_argument("--top-k", type=int, default=5, help="concepts to report")

    p = sub.add_parser("retrieve", help="query a triple index", formatter_class=fmt)
    p.add_argument("--concepts", type=_csv_list, default=[], help="comma-separated image concepts (priority tier)")
    p.add_argument("--keywords", type=_csv_list, default=[], help="comma-separated question keywords")
    p.add_argument("--kg", required=True, help="index prefix written by ingest or gen")
    p.add_argument("--k", type=int, default=kg.DEFAULT_K, help="maximum triples returned")
    p.add_argument("--block-relation", action="append", default=[],
                   help="drop triples with this relation (repeatable)")

    p = sub.add_parser("train", help="train Model A or B on a generated dataset", formatter_class=fmt)
    p.add_argument("--variant", choices=["a", "b"], type=str.lower, required=True, help="model variant")
    p.add_argument("--data", required=True, help="dataset directory written by gen")
    p.add_argument("--kg", default=None, help="index prefix; default <data>/kg")
    p.add_argument("--preset", default=None, help="model preset; default model-<variant>-synth")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--seed", type=int, required=True, help="init and shuffle seed")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam", help="optimizer")
    p.add_argument("--beta1", type=float, default=0.9, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2")
    p.add_argument("--adam-eps", type=float, default=1e-8, help="Adam epsilon")
    p.add_argument("--eval-every", type=int, default=1, help="epochs between reports")
    p.add_argument("--block-relation", action="append", default=[],
                   help="drop triples with this relation from retrieval (repeatable)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report-dir", default=None,
                   help="where reports.jsonl and summary.json go; default the checkpoint's directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--kg", default=None, help="index prefix; default <data>/kg")
    p.add_argument("--split", choices=["train", "val", "all"], default="val", help="split to score")
    p.add_argument("--block-relation", action="append", default=[],
                   help="drop triples with this relation from retrieval (repeatable)")

    p = sub.add_parser("analyze", help="bias, retrieval or overfitting-gap analysis", formatter_class=fmt)
    p.add_argument("--what", choices=["bias", "retrieval", "gap"], required=True, help="analysis to run")
    p.add_argument("--ckpt", default=None, help="checkpoint (bias)")
    p.add_argument("--data", default=None, help="dataset directory (bias, retrieval)")
    p.add_argument("--kg", default=None, help="index prefix; default <data>/kg (bias, retrieval)")
    p.add_argument("--split", choices=["train", "val", "all"], default="val", help="split (bias, retrieval)")
    p.add_argument("--reports", default=None, help="reports.jsonl written by train (gap)")
    p.add_argument("--threshold", type=float, default=pl.GAP_THRESHOLD, help="gap flag threshold (gap)")
    p.add_argument("--block-relation", action="append", default=[],
                   help="drop triples with this relation from retrieval (repeatable)")
    return parser


def _echo_config(args) -> None:
    cfg = {k: v for k, v in vars(args).items()}
    print("# config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _kg_prefix(args) -> str:
    prefix = args.kg or (str(Path(args.data) / "kg") if args.data else None)
    if prefix is None:
        raise UsageError("--kg (or --data) is required")
    _require(prefix + ".meta.json", "index header")
    return prefix


def _split(ds: sv.SyntheticDataset, name: str):
    samples = ds.samples if name == "all" else ds.split(name)
    if not samples:
        raise DataError(f"split {name!r} is empty")
    return samples


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    src = _require(args.edges, "edges file")
    triples, stats = kg.read_assertions(src, args.lang)
    for err in stats.errors[:args.max_errors]:
        print(f"{src}: {err}", file=sys.stderr)
    index = kg.build_index(triples)
    tsv, meta = kg.save_index(index, args.out, args.lang, source_mtime=os.stat(src).st_mtime,
                              extra={"source": src.name, "parse_errors": len(stats.errors)})
    _emit({"lines": stats.lines, "kept": stats.kept, "skipped": stats.skipped,
           "errors": len(stats.errors), "triples": len(index), "concepts": len(index.by_concept),
           "relation_counts": dict(index.relation_counts), "files": [str(tsv), str(meta)]})
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        ds = sv.build_benchmark(args.seed, args.scenes, args.questions_per_scene, args.mix,
                                args.noise, args.bind)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = sv.save_dataset(ds, args.out)
    _emit({**ds.meta, "out": str(out)})
    return EXIT_OK


def cmd_detect(args) -> int:
    labels = fs.load_embeddings(_require(args.labels, "label table"), "label512")
    images_path = args.images or (str(Path(args.data) / "images.vec") if args.data else None)
    if images_path is None:
        raise UsageError("--images or --data is required")
    images = fs.load_embeddings(_require(images_path, "image table"), "image512")
    if args.image_id not in images:
        raise DataError(f"image id {args.image_id!r} not in {images_path}")
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    for token, score in fs.detect_concepts(images[args.image_id], labels, args.top_k).concepts:
        print(f"{token}\t{score!r}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    index = kg.load_index(_kg_prefix(args))
    result = kg.retrieve(index, args.concepts, args.keywords, args.k, args.block_relation)
    for row in result.to_rows():
        print(row)
    return EXIT_OK


def _load_data(args):
    ds = sv.load_dataset(_require(args.data, "dataset directory"))
    index = kg.load_index(_kg_prefix(args))
    return ds, index


def cmd_train(args) -> int:
    ds, index = _load_data(args)
    preset = args.preset or f"model-{args.variant}-synth"
    try:
        cfg = models.load_preset(preset)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.variant.lower() != args.variant:
        raise UsageError(f"preset {preset} is variant {cfg.variant}, not {args.variant.upper()}")
    try:
        tcfg = pl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                              optimizer=args.optimizer, beta1=args.beta1, beta2=args.beta2,
                              eps=args.adam_eps, seed=args.seed, eval_every=args.eval_every,
                              blocked_relations=tuple(args.block_relation))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print("# model: " + json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)
    pl.check_vocabulary(cfg, ds.answers)
    report_dir = Path(args.report_dir) if args.report_dir else Path(args.out).resolve().parent
    report_dir.mkdir(parents=True, exist_ok=True)
    train_data = pl.prepare(ds.split("train"), ds, index, ds.tables, cfg=tcfg)
    val_samples = ds.split("val")
    val_data = pl.prepare(val_samples, ds, index, ds.tables, cfg=tcfg) if val_samples else None
    params, reports = pl.train_prepared(cfg, train_data, val_data, tcfg)
    models.save_checkpoint(params, cfg, args.out)
    pl.write_reports(reports, report_dir / "reports.jsonl")
    extra = {"checkpoint": str(args.out), "data": str(args.data), "params": models.param_count(cfg)}
    if val_data is not None:
        result = pl.evaluate(params, cfg, val_data)
        _, baseline = pl.majority_baseline(train_data.labels, val_data.labels)
        extra["val"] = result.to_json(ds.answers)
        extra["majority_baseline_val_accuracy"] = baseline
    pl.write_summary(report_dir / "summary.json", cfg, tcfg, reports, extra)
    _emit({"checkpoint": str(args.out), "reports": str(report_dir / "reports.jsonl"),
           "final": reports[-1].to_json(), **{k: v for k, v in extra.items() if k != "val"}})
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = models.load_checkpoint(_require(args.ckpt, "checkpoint"))
    ds, index = _load_data(args)
    pl.check_vocabulary(cfg, ds.answers)
    tcfg = pl.TrainConfig(blocked_relations=tuple(args.block_relation))
    data = pl.prepare(_split(ds, args.split), ds, index, ds.tables, cfg=tcfg)
    result = pl.evaluate(params, cfg, data)
    out = result.to_json(ds.answers)
    out["split"] = args.split
    train_labels = np.array([s.gold_answer for s in ds.split("train")])
    if len(train_labels):
        label, acc = pl.majority_baseline(train_labels, data.labels)
        out["majority_baseline"] = {"answer": ds.answers[label], "accuracy": acc}
    _emit(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.what == "gap":
        if not args.reports:
            raise UsageError("--reports is required for --what gap")
        rows = pl.overfitting_gap(pl.read_reports(_require(args.reports, "reports file")), args.threshold)
        _emit({"threshold": args.threshold, "epochs": rows,
               "flagged_epochs": [r["epoch"] for r in rows if r["flagged"]]})
        return EXIT_OK
    if not args.data:
        raise UsageError(f"--data is required for --what {args.what}")
    ds, index = _load_data(args)
    tcfg = pl.TrainConfig(blocked_relations=tuple(args.block_relation))
    samples = _split(ds, args.split)
    if args.what == "retrieval":
        stats = pl.analyze_retrieval(samples, ds, index, ds.tables, cfg=tcfg)
        _emit({"split": args.split, **stats.to_json()})
        return EXIT_OK
    if not args.ckpt:
        raise UsageError("--ckpt is required for --what bias")
    params, cfg = models.load_checkpoint(_require(args.ckpt, "checkpoint"))
    pl.check_vocabulary(cfg, ds.answers)
    preds = pl.predict(params, cfg, pl.prepare(samples, ds, index, ds.tables, cfg=tcfg))
    ranked = pl.analyze_bias(preds, ds.answers)
    _emit({"split": args.split, "predictions": len(preds),
           "ranking": [{"answer": a, "fraction": f} for a, f in ranked]})
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "gen": cmd_gen, "detect": cmd_detect, "retrieve": cmd_retrieve,
            "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _echo_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"krisplite {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.TrainingAborted as exc:
        print(f"krisplite {args.command}: numerical abort at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"krisplite {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"krisplite {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
