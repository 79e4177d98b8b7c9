"""Command-line entry point: ``esim-saliency <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error (including a failed
gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import render
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import LABELS, build_vocab, bundled_examples, encode_all, load_embeddings, read_snli_jsonl
from .esim import EsimParams
from .introspect import compare_models, explain
from .trainer import TrainConfig, TrainingDivergedError, evaluate, train

OUT_ENV = "ESIM_SALIENCY_OUT"
logger = logging.getLogger("esim_saliency")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _default_out():
    return os.environ.get(OUT_ENV, "esim_out")


def _existing_file(path):
    if not os.path.isfile(path):
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return path


def _label(value):
    if value in LABELS:
        return LABELS.index(value)
    raise argparse.ArgumentTypeError(f"label must be one of {', '.join(LABELS)}")


def build_parser():
    p = _Parser(prog="esim-saliency", description="ESIM training and saliency inspection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--train", type=_existing_file, help="SNLI JSONL training file")
    src.add_argument("--bundled", action="store_true", help="train on the bundled probe suite")
    t.add_argument("--dev", type=_existing_file, help="SNLI JSONL evaluation file")
    t.add_argument("--train-limit", type=int, help="use only the first N training pairs")
    t.add_argument("--dev-limit", type=int, help="use only the first N evaluation pairs")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="per-epoch JSON lines output (default: <out>.report.jsonl)")
    t.add_argument("--d", type=int, default=50)
    t.add_argument("--r", type=int, default=50)
    t.add_argument("--d-h", type=int)
    t.add_argument("--lr", type=float, default=4e-4)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--epochs", type=int, default=3)
    t.add_argument("--clip-norm", type=float, default=10.0)
    t.add_argument("--dropout", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--min-count", type=int, default=1)
    t.add_argument("--stop-at-train-accuracy", type=float)
    t.add_argument("--embeddings", type=_existing_file, help="pretrained vectors, 'token v1 ... vr' per line")

    e = sub.add_parser("eval", help="accuracy and confusion counts")
    e.add_argument("--checkpoint", required=True, type=_existing_file)
    esrc = e.add_mutually_exclusive_group(required=True)
    esrc.add_argument("--data", type=_existing_file)
    esrc.add_argument("--bundled", action="store_true")
    e.add_argument("--limit", type=int)

    x = sub.add_parser("explain", help="attention saliency and gate curves for one pair")
    x.add_argument("--checkpoint", required=True, type=_existing_file)
    x.add_argument("--premise", required=True)
    x.add_argument("--hypothesis", required=True)
    x.add_argument("--label", type=_label, help="explain this class instead of the prediction")
    _output_flags(x)

    c = sub.add_parser("compare", help="explain one pair under two checkpoints")
    c.add_argument("--checkpoint-a", required=True, type=_existing_file)
    c.add_argument("--checkpoint-b", required=True, type=_existing_file)
    c.add_argument("--premise", required=True)
    c.add_argument("--hypothesis", required=True)
    _output_flags(c)

    b = sub.add_parser("bundled", help="explain every pair of the bundled probe suite")
    b.add_argument("--checkpoint", required=True, type=_existing_file)
    _output_flags(b)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients at toy size")
    g.add_argument("--seeds", type=int, default=20)
    return p


def _output_flags(p):
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./esim_out)")
    p.add_argument("--csv", action="store_true", help="also write CSV tables")
    p.add_argument("--include-cell", action="store_true", help="also compute memory-cell curves")


def write_report(report, out_dir, csv=False, spec=render.RenderSpec()):
    """Write the JSON report, 2 heatmaps and 4 gate panels (plus CSVs); returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    label = report.predicted_label
    files = {
        "report.json": report.to_json(indent=1, sort_keys=True) + "\n",
        "attention.svg": render.heatmap_svg(report.attention, spec, label),
        "saliency.svg": render.heatmap_svg(report.saliency, spec, label),
    }
    for sentence, curves in report.gates.items():
        for direction in ("forward", "backward"):
            files[f"gates_{sentence}_{direction}.svg"] = render.gate_panel_svg(curves, direction, spec, label)
        if csv:
            files[f"gates_{sentence}.csv"] = render.curves_csv(curves)
    if csv:
        files["attention.csv"] = render.map_csv(report.attention)
        files["saliency.csv"] = render.map_csv(report.saliency)
    paths = []
    for name, text in files.items():
        paths.append(render.write_text(os.path.join(out_dir, name), text))
    return paths


def _load_examples(path, limit):
    parsed = read_snli_jsonl(path)
    if parsed.errors:
        logger.warning("%s: %d malformed lines (first: line %d)", path, len(parsed.errors), parsed.errors[0][0])
    examples = parsed.examples
    return examples[:limit] if limit else examples


def cmd_train(args):
    raw = bundled_examples() if args.bundled else _load_examples(args.train, args.train_limit)
    dev = _load_examples(args.dev, args.dev_limit) if args.dev else []
    vocab = build_vocab(raw, args.min_count)
    train_set, rejected = encode_all(raw, vocab)
    for ex, why in rejected:
        logger.warning("skipping example: %s", why)
    dev_set, _ = encode_all(dev, vocab)
    config = TrainConfig(d=args.d, r=args.r, d_h=args.d_h, learning_rate=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs, clip_norm=args.clip_norm, seed=args.seed, dropout=args.dropout,
                         stop_at_train_accuracy=args.stop_at_train_accuracy)
    init = EsimParams.initialize(config.d, config.r, len(vocab), config.d_h, seed=config.seed)
    if args.embeddings:
        with open(args.embeddings, encoding="utf-8") as fh:
            logger.info("loaded %d pretrained vectors", load_embeddings(fh, vocab, init.arrays["embedding"]))
    report_path = args.report or args.out + ".report.jsonl"
    params, report = train(config, train_set, dev_set, params=init,
                           on_epoch=lambda rec: print(json.dumps(rec.__dict__, sort_keys=True), flush=True))
    save_checkpoint(params, vocab, args.out)
    render.write_text(report_path, report.to_jsonl())
    return 0


def cmd_eval(args):
    params, vocab = load_checkpoint(args.checkpoint)
    raw = bundled_examples() if args.bundled else _load_examples(args.data, args.limit)
    data, _ = encode_all(raw, vocab)
    res = evaluate(params, data)
    print(json.dumps({"accuracy": res.accuracy, "total": int(res.confusion.sum()),
                      "labels": list(LABELS), "confusion": res.confusion.tolist()}))
    return 0


def cmd_explain(args):
    params, vocab = load_checkpoint(args.checkpoint)
    report = explain(params, vocab, args.premise, args.hypothesis, args.label, include_cell=args.include_cell,
                     metadata={"checkpoint": os.path.abspath(args.checkpoint)})
    for path in write_report(report, args.out_dir or _default_out(), args.csv):
        print(path)
    return 0


def cmd_compare(args):
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    out = args.out_dir or _default_out()
    result = compare_models(a, b, args.premise, args.hypothesis, names=("A", "B"))
    result.report_a.metadata["checkpoint"] = os.path.abspath(args.checkpoint_a)
    result.report_b.metadata["checkpoint"] = os.path.abspath(args.checkpoint_b)
    write_report(result.report_a, os.path.join(out, "A"), args.csv)
    write_report(result.report_b, os.path.join(out, "B"), args.csv)
    summary = dict(result.summary, checkpoints={"A": args.checkpoint_a, "B": args.checkpoint_b})
    render.write_text(os.path.join(out, "summary.json"), json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_bundled(args):
    params, vocab = load_checkpoint(args.checkpoint)
    out = args.out_dir or _default_out()
    rows = []
    for ex in bundled_examples():
        report = explain(params, vocab, ex.premise, ex.hypothesis, include_cell=args.include_cell,
                         metadata={"checkpoint": os.path.abspath(args.checkpoint), "example": ex.id})
        write_report(report, os.path.join(out, ex.id), args.csv)
        rows.append({"id": ex.id, "category": ex.category, "gold": ex.gold, "predicted": report.predicted_label})
    render.write_text(os.path.join(out, "index.json"), json.dumps(rows, indent=1) + "\n")
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite
    ok, results = run_suite(range(args.seeds))
    for r in results:
        print(f"seed {r.seed:3d}  max rel err {r.max_error:.3e}  forward diff {r.forward_error:.1e}  "
              f"{'ok' if r.passed() else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {TOLERANCE:g})")
    return 0 if ok else 2


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "explain": cmd_explain, "compare": cmd_compare,
            "bundled": cmd_bundled, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CheckpointError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"esim-saliency {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
