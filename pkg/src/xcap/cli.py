"""Command-line entry point: ``xcap {synth,train,generate,eval,gradcheck}``.

Every flag can also come from ``--config FILE.json`` (keys are the flag
names with dashes or underscores); explicit flags win over the file, the
file wins over built-in defaults. On success a one-line JSON summary is
written to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .captioner import DEFAULT_MAX_LEN, ModelConfig, decode_greedy
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import evaluate, export_attention, format_report, write_report
from .gradcheck import check_captioner_gradients
from .grammar import EOT
from .synthdata import DatasetError, SynthConfig, generate_dataset, load_dataset, load_vocab
from .tensor import NonFiniteError
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("xcap")

GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


def _summary(command: str, **fields) -> None:
    print(json.dumps({"command": command, "status": "ok", **fields}, sort_keys=True), file=sys.stderr)


def _cmd_synth(args) -> int:
    cfg = SynthConfig(train=args.train, val=args.val, test=args.test, fracture_rate=args.fracture_rate,
                      noise_sigma=args.noise_sigma, signal_strength=args.signal_strength, seed=args.seed)
    summary = generate_dataset(cfg, args.out)
    _summary("synth", **summary)
    return 0


def _cmd_train(args) -> int:
    vocab = load_vocab(args.data)
    train_records = load_dataset(args.data, "train")
    val_records = load_dataset(args.data, "val")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                      keep_rate=args.keep_rate, augment_sigma=args.augment_sigma,
                      grad_clip_norm=args.clip, seed=args.seed, early_stop_patience=args.patience,
                      target_loss=args.target_loss)
    model = ModelConfig(vocab_size=len(vocab), hidden=args.hidden, embed=args.embed,
                        attention=args.attention)
    params, history = train(
        train_records, val_records, cfg, model,
        on_epoch=lambda e: print(f"epoch {e.epoch:3d}  train {e.train_loss:.5f}  val {e.val_loss:.5f}"))
    save_checkpoint(params, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    history.to_csv(history_path)
    last = history.epochs[-1]
    _summary("train", checkpoint=str(args.out), history=str(history_path), epochs=len(history.epochs),
             best_epoch=history.best_epoch, train_loss=last.train_loss, val_loss=last.val_loss,
             seconds=round(history.seconds, 3))
    return 0


def _load_model_for(args):
    vocab = load_vocab(args.data)
    params = load_checkpoint(args.model, vocab_size=len(vocab))
    records = load_dataset(args.data, args.split)
    return vocab, params, records


def _cmd_generate(args) -> int:
    vocab, params, records = _load_model_for(args)
    if args.ids:
        wanted = [s.strip() for s in args.ids.split(",") if s.strip()]
        known = {r.id: r for r in records}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise DatasetError(f"unknown record id(s) in split {args.split!r}: {', '.join(unknown)}")
        records = [known[w] for w in wanted]
    for record in records:
        ids, trace = decode_greedy(record.features, params, args.max_len)
        print(f"{record.id}\t{' '.join(vocab.decode(ids))}")
        if args.attention_out:
            export_attention(trace, vocab.decode(ids, strip=False), Path(args.attention_out) / record.id)
    _summary("generate", records=len(records))
    return 0


def _cmd_eval(args) -> int:
    vocab, params, records = _load_model_for(args)
    report, predictions = evaluate(params, records, vocab, args.max_len)
    if args.attention_out:
        for record, words, trace in predictions:
            # the trace also covers the closing <eot> step, which decode() strips
            labels = [*words, EOT][:len(trace)]
            export_attention(trace, labels, Path(args.attention_out) / record.id)
    write_report(report, args.out)
    print(format_report(report))
    if report.get("bleu_monotone") is False:
        log.warning("n-gram precisions are not monotone: %s", report["bleu"])
    fields = {"report": str(args.out)}
    if report.get("bleu"):
        fields["bleu4"] = report["bleu"]["cumulative"]
    _summary("eval", **fields)
    return 0


def _cmd_gradcheck(args) -> int:
    report = check_captioner_gradients(args.seed, args.eps)
    for name, err in report.items():
        print(f"{name:18s} {err:.3e}")
    worst = max(report.values())
    print(f"max relative error {worst:.3e} (threshold {args.threshold:g})")
    if worst >= args.threshold:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    _summary("gradcheck", max_relative_error=worst)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xcap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file supplying defaults for any flag")
        p.set_defaults(handler=handler)
        return p

    p = command("synth", _cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--fracture-rate", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--signal-strength", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = command("train", _cmd_train, "train a captioner")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV (default: CHECKPOINT.history.csv)")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--keep-rate", type=float, default=0.8)
    p.add_argument("--augment-sigma", type=float, default=0.02)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--target-loss", type=float, default=None)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--embed", type=int, default=256)
    p.add_argument("--attention", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    for name, handler, text in (("generate", _cmd_generate, "decode sentences for a split"),
                                ("eval", _cmd_eval, "score a checkpoint on a split")):
        p = command(name, handler, text)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
        p.add_argument("--attention-out")
        if name == "generate":
            p.add_argument("--ids", help="comma-separated record ids")
        else:
            p.add_argument("--out", required=True, help="JSON report path")

    p = command("gradcheck", _cmd_gradcheck, "finite-difference check of the reduced captioner")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=GRADCHECK_THRESHOLD)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    subparsers = parser._subparsers._group_actions[0].choices
    required = {name: [a for a in sp._actions if a.required] for name, sp in subparsers.items()}
    # first pass only locates the command and its --config file
    for actions in required.values():
        for action in actions:
            action.required = False
    args = parser.parse_args(argv)
    subparser = subparsers[args.command]
    defaults = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            subparser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            subparser.error("--config must contain a JSON object")
        dests = {a.dest for a in subparser._actions} - {"help", "config"}
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                subparser.error(f"unknown key {key!r} in --config")
            defaults[dest] = value
        subparser.set_defaults(**defaults)
    for action in required[args.command]:
        action.required = action.dest not in defaults
    return parser.parse_args(argv)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (DatasetError, CheckpointError, TrainingError, NonFiniteError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
