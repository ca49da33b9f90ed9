"""Command-line entry point: ``textseg <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command that takes ``--out`` writes ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from functools import partial
from pathlib import Path

from . import __version__
from .corpus import (Hypothesis, LabeledDocument, Rejected, apply_filters,
                     corpus_stats, dump_record, generate_choi_style,
                     parse_document, prepare_training_doc, source_vocabulary,
                     split_80_10_10, synthetic_pool, to_labeled)
from .embeddings import OOV_POLICIES, load_vectors, one_hot_table, save_vectors
from .errors import DataError, NonFiniteLoss, NumericError, ParseError
from .infer import greedy_decode, prediction_record, tune_threshold
from .metrics import VARIANTS, evaluate_corpus, random_baseline_segmenter
from .model import ModelConfig, init_params, load_checkpoint, predict_probs, save_checkpoint
from .train import TrainConfig, train

log = logging.getLogger("textseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 13


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ I/O

def load_corpus(path) -> list[LabeledDocument]:
    """Read labeled records from a directory of ``*.json`` files, a split
    manifest (``.txt``, paths relative to the manifest), or a ``.jsonl`` file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus not found: {path}")
    if path.is_dir():
        files = sorted(p for p in path.rglob("*.json") if p.name != "manifest.json")
    elif path.suffix == ".jsonl":
        with open(path, encoding="utf-8") as fh:
            return [LabeledDocument.from_record(json.loads(line)) for line in fh if line.strip()]
    else:
        with open(path, encoding="utf-8") as fh:
            files = [path.parent / line.strip() for line in fh if line.strip()]
    docs = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            docs.append(LabeledDocument.from_record(json.load(fh)))
    return docs


def load_table(path, oov="zeros"):
    with open(path, "rb") as fh:
        return load_vectors(fh, oov=oov)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in lines)


def write_manifest(out: Path, args, started: float, outputs, extra=None) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v)
             for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "flags": flags,
        "seeds": {"seed": getattr(args, "seed", None)},
        "outputs": sorted(str(o) for o in outputs),
        "version": __version__,
        "wall_seconds": round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    _write_json(out / "manifest.json", manifest)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_tau(args) -> float:
    if args.tau is not None:
        return args.tau
    if args.tau_file:
        with open(args.tau_file, encoding="utf-8") as fh:
            return float(json.load(fh)["tau"])
    raise UsageError("a threshold is required: pass --tau or --tau-file")


def _load_model(args):
    table = load_table(args.vectors, args.oov)
    return load_checkpoint(args.model, expected_d=table.dim), table


def _predict_one(params, table, tau, doc):
    probs = predict_probs(params, doc, table)
    return probs, greedy_decode(probs, tau)


def _map_docs(fn, docs, jobs):
    if jobs > 1 and len(docs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, docs, chunksize=max(1, len(docs) // (4 * jobs))))
    return [fn(d) for d in docs]


# ------------------------------------------------------------- commands

def cmd_build_corpus(args) -> int:
    started = time.time()
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory not found: {in_dir}")
    files = sorted(p for p in in_dir.rglob("*")
                   if p.is_file() and not any(part.startswith(".") for part in p.relative_to(in_dir).parts))
    if not files:
        raise DataError(f"no document files under {in_dir}")
    out = _out_dir(args)
    docs_dir = out / "docs"
    rejected: dict[str, list[str]] = {}
    accepted: dict[str, str] = {}
    for f in files:
        doc_id = f.relative_to(in_dir).as_posix()
        try:
            raw = f.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable %s: %s", f, exc)
            rejected.setdefault("unreadable", []).append(doc_id)
            continue
        try:
            doc = parse_document(raw, doc_id)
        except ParseError as exc:
            log.warning("skipping %s: %s", doc_id, exc)
            rejected.setdefault("parse_error", []).append(doc_id)
            continue
        filtered = apply_filters(doc, args.max_removed)
        if isinstance(filtered, Rejected):
            rejected.setdefault(filtered.reason, []).append(doc_id)
            continue
        rel = f"docs/{doc_id}.json"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        (out / rel).write_text(dump_record(to_labeled(filtered)) + "\n", encoding="utf-8")
        accepted[doc_id] = rel
    train_ids, dev_ids, test_ids = split_80_10_10(list(accepted), args.seed)
    for name, ids in (("train", train_ids), ("dev", dev_ids), ("test", test_ids)):
        _write_lines(out / f"{name}.txt", [accepted[i] for i in ids])
    counts = {"input_files": len(files), "accepted": len(accepted),
              "train": len(train_ids), "dev": len(dev_ids), "test": len(test_ids),
              "rejected": {k: len(v) for k, v in sorted(rejected.items())}}
    write_manifest(out, args, started, ["train.txt", "dev.txt", "test.txt", str(docs_dir.name)],
                   {"counts": counts, "rejected_ids": {k: v for k, v in sorted(rejected.items())}})
    print(json.dumps(counts, sort_keys=True))
    if not accepted:
        log.error("every document was rejected")
        return EXIT_DATA
    return EXIT_OK


def cmd_stats(args) -> int:
    started = time.time()
    stats = asdict(corpus_stats(load_corpus(args.corpus)))
    print(json.dumps(stats, indent=2, sort_keys=True))
    if args.out:
        out = _out_dir(args)
        _write_json(out / "stats.json", stats)
        write_manifest(out, args, started, ["stats.json"])
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    table = load_table(args.vectors, args.oov)
    train_docs = load_corpus(args.train)
    dev_docs = load_corpus(args.dev) if args.dev else []
    dropped = 0
    if not args.no_training_transform:
        prepared = []
        for d in train_docs:
            r = prepare_training_doc(d)
            if isinstance(r, Rejected):
                dropped += 1
            else:
                prepared.append(r)
        train_docs = prepared
    mcfg = ModelConfig(d=table.dim, h1=args.h1, h2=args.h2, seed=args.seed,
                       layers=args.layers, cap=args.cap)
    tcfg = TrainConfig(lr=args.lr, epochs=args.epochs, clip=args.clip, seed=args.seed,
                       shuffle=not args.no_shuffle, patience=args.patience,
                       target_loss=args.target_loss)
    out = _out_dir(args)
    outputs = ["model.ckpt", "history.json", "report.json"]

    def on_improve(params, epoch):
        save_checkpoint(params, out / "best.ckpt")
        if "best.ckpt" not in outputs:
            outputs.append("best.ckpt")

    params = init_params(mcfg)
    status = EXIT_OK
    try:
        params, history = train(params, train_docs, dev_docs, table, tcfg, on_improve)
    except NonFiniteLoss as exc:
        log.error("training aborted: %s", exc)
        params, history, status = exc.params, exc.history, EXIT_NUMERIC
    save_checkpoint(params, out / "model.ckpt")
    _write_json(out / "history.json", history.to_dict())
    report = {"model_config": asdict(mcfg), "train_config": asdict(tcfg),
              "train_docs": len(train_docs), "dropped_by_training_transform": dropped,
              "dev_docs": len(dev_docs), "history": history.to_dict(timing=True),
              "checkpoint": str(out / "model.ckpt"), "status": "ok" if status == EXIT_OK else "non_finite_loss"}
    _write_json(out / "report.json", report)
    write_manifest(out, args, started, outputs)
    if history.train_loss:
        print(f"final train loss {history.train_loss[-1]:.6f} after {len(history.train_loss)} epochs")
    return status


def cmd_tune(args) -> int:
    started = time.time()
    params, table = _load_model(args)
    tau, dev_pk = tune_threshold(params, load_corpus(args.dev), table)
    out = _out_dir(args)
    _write_json(out / "tau.json", {"tau": tau, "dev_pk": dev_pk})
    write_manifest(out, args, started, ["tau.json"])
    print(f"tau {tau:.2f} dev Pk {dev_pk:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.time()
    tau = _load_tau(args)
    params, table = _load_model(args)
    docs = load_corpus(args.corpus)
    results = _map_docs(partial(_predict_one, params, table, tau), docs, args.jobs)
    out = _out_dir(args)
    _write_lines(out / "predictions.jsonl",
                 [json.dumps(prediction_record(d.id, p, h), sort_keys=True) for d, (p, h) in zip(docs, results)])
    write_manifest(out, args, started, ["predictions.jsonl"], {"tau": tau})
    print(f"wrote {len(docs)} predictions")
    return EXIT_OK


def _segmenter_from_predictions(path):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                hyps[str(rec["id"])] = Hypothesis.from_sizes(rec["sizes"])

    def segment(doc):
        if doc.id not in hyps:
            raise DataError(f"no prediction for document {doc.id!r}")
        return hyps[doc.id]

    return segment


def cmd_evaluate(args) -> int:
    started = time.time()
    docs = load_corpus(args.corpus)
    tau = None
    if args.predictions:
        segmenter = _segmenter_from_predictions(args.predictions)
    elif args.baseline:
        segmenter = random_baseline_segmenter(docs, args.seed)
    elif args.model:
        if not args.vectors:
            raise UsageError("--model needs --vectors")
        tau = _load_tau(args)
        params, table = _load_model(args)
        hyps = dict(zip((d.id for d in docs),
                        (h for _, h in _map_docs(partial(_predict_one, params, table, tau), docs, args.jobs))))
        segmenter = lambda doc: hyps[doc.id]  # noqa: E731
    else:
        raise UsageError("pass one of --predictions, --model or --baseline")
    report = evaluate_corpus(segmenter, docs, args.variant, tau)
    out = _out_dir(args)
    _write_json(out / "report.json", report.to_dict())
    write_manifest(out, args, started, ["report.json"])
    for d in report.per_doc:
        print(f"{d.id}\tk={d.k}\tpk={d.pk:.4f}")
    for doc_id in report.skipped:
        print(f"{doc_id}\tskipped (window too large)")
    mean = report.mean
    print(f"Pk ({args.variant}) mean over {len(report.per_doc)} docs: "
          + ("n/a" if mean is None else f"{mean:.4f}"))
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    started = time.time()
    lo, hi = args.seg_len
    outputs = ["docs", "all.txt"]
    if args.pool:
        pool = {}
        for f in sorted(Path(args.pool).rglob("*")):
            if f.is_file():
                doc = parse_document(f.read_text(encoding="utf-8"), f.name)
                pool[f.name] = [s for seg in doc.segments for s in seg.iter_sentences()]
    else:
        pool = synthetic_pool(args.sources, args.vocab_per_source, args.sentences_per_source,
                              tuple(args.sentence_len), seed=args.pool_seed)
    docs = generate_choi_style(pool, args.docs, args.segs_per_doc, (lo, hi), args.seed, args.id_prefix)
    out = _out_dir(args)
    (out / "docs").mkdir(exist_ok=True)
    paths = []
    for d in docs:
        rel = f"docs/{d.id}.json"
        (out / rel).write_text(dump_record(d) + "\n", encoding="utf-8")
        paths.append(rel)
    _write_lines(out / "all.txt", paths)
    if not args.pool and not args.no_vectors:
        vocab = [w for s in range(args.sources) for w in source_vocabulary(s, args.vocab_per_source)]
        with open(out / "vectors.txt", "w", encoding="utf-8") as fh:
            save_vectors(one_hot_table(vocab), fh)
        outputs.append("vectors.txt")
    write_manifest(out, args, started, outputs)
    print(f"wrote {len(docs)} documents to {out}")
    return EXIT_OK


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="textseg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for all randomness (default 13)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for per-document work")
        p.add_argument("--out", required=out_required, help="output directory")

    def model_flags(p, required=True):
        p.add_argument("--model", required=required, help="checkpoint file")
        p.add_argument("--vectors", required=required, help="word vectors in text format")
        p.add_argument("--oov", choices=OOV_POLICIES, default="zeros", help="vector for unknown tokens")

    def tau_flags(p):
        p.add_argument("--tau", type=float, help="decoding threshold")
        p.add_argument("--tau-file", help="tau.json written by 'tune'")

    p = sub.add_parser("build-corpus", help="parse, filter and label documents; write 80/10/10 splits")
    p.add_argument("in_dir")
    p.add_argument("--max-removed", type=float, default=0.5,
                   help="reject a document when more than this fraction of its segments is filtered")
    common(p)
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("stats", help="segment statistics of a labeled corpus")
    p.add_argument("--corpus", required=True)
    common(p, out_required=False)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the segmentation model with SGD")
    p.add_argument("--train", required=True, help="training corpus")
    p.add_argument("--dev", help="dev corpus for per-epoch loss and best checkpoint")
    p.add_argument("--vectors", required=True)
    p.add_argument("--oov", choices=OOV_POLICIES, default="zeros")
    p.add_argument("--h1", type=int, default=128, help="sentence encoder hidden size")
    p.add_argument("--h2", type=int, default=128, help="predictor hidden size")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--cap", type=int, default=256, help="max tokens per sentence")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--clip", type=float, help="global gradient-norm clip")
    p.add_argument("--patience", type=int, help="stop after this many epochs without dev improvement")
    p.add_argument("--target-loss", type=float, help="stop once mean training loss drops below this")
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--no-training-transform", action="store_true",
                   help="keep the first segment and list/code sentences (e.g. synthetic corpora)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="pick the decoding threshold on a dev corpus")
    model_flags(p)
    p.add_argument("--dev", required=True)
    common(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="segment a corpus")
    model_flags(p)
    tau_flags(p)
    p.add_argument("--corpus", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Pk of predictions, a model, or the random baseline")
    p.add_argument("--corpus", required=True, help="reference corpus")
    p.add_argument("--predictions", help="predictions.jsonl written by 'predict'")
    p.add_argument("--baseline", choices=["random"], help="score the random baseline instead")
    p.add_argument("--variant", choices=VARIANTS, default="sentences")
    model_flags(p, required=False)
    tau_flags(p)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-synth", help="build a synthetic corpus of concatenated passages")
    p.add_argument("--docs", type=int, default=100)
    p.add_argument("--segs-per-doc", type=int, default=10)
    p.add_argument("--seg-len", type=int, nargs=2, default=[3, 11], metavar=("LO", "HI"))
    p.add_argument("--id-prefix", default="synth")
    p.add_argument("--pool", help="directory of documents; each file is one passage source")
    p.add_argument("--sources", type=int, default=12, help="built-in pool: number of sources")
    p.add_argument("--vocab-per-source", type=int, default=2)
    p.add_argument("--sentences-per-source", type=int, default=60)
    p.add_argument("--sentence-len", type=int, nargs=2, default=[2, 5], metavar=("LO", "HI"))
    p.add_argument("--pool-seed", type=int, default=0)
    p.add_argument("--no-vectors", action="store_true", help="skip writing one-hot vectors.txt")
    common(p)
    p.set_defaults(func=cmd_gen_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
