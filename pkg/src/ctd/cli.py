"""Command-line entry point: data generation, training, correction, evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evaluator as ev
from . import synthetic, text, trainer
from .head import VARIANTS, CTDModel, correct_batch

log = logging.getLogger("ctd")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}, ensure_ascii=False) + "\n")
    sys.exit(code)


def _need(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(args, where: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("config", "func")}
    where.mkdir(parents=True, exist_ok=True)
    (where / "run_config.json").write_text(json.dumps(cfg, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


def _read_lines(path) -> list[str]:
    return [text.nfc(line.rstrip("\r\n")) for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()]


def _train_config(args, stage: str) -> trainer.TrainConfig:
    preset = dict(trainer.TRAIN_PRESETS[args.preset])
    for key in ("batch_size", "max_epochs", "patience", "peak_lr", "max_steps"):
        value = getattr(args, key, None)
        if value is not None:
            preset[key] = value
    return trainer.TrainConfig(stage=stage, seed=args.seed, **preset)


# ---------------------------------------------------------------------------
# commands


def cmd_make_corpus(args):
    out = _out_dir(args)
    paths = synthetic.write_resources(out, args.n_sentences, args.seed)
    _write_run_config(args, out)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def cmd_build_vocab(args):
    _need(*args.corpus)
    lines = []
    for path in args.corpus:
        for line in _read_lines(path):
            lines.extend(line.split("\t"))
    vocab = text.build_vocab(lines)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _write_run_config(args, out.parent)
    log.info("vocabulary of %d entries -> %s", len(vocab), out)


def cmd_gen_data(args):
    _need(args.corpus, args.confusion, args.stopwords)
    sentences = _read_lines(args.corpus)
    model = text.ConfusionModel.load(args.confusion, rate=args.rate)
    rng = np.random.default_rng(args.seed)
    pairs = [text.inject_errors(s, model, rng) for s in sentences]
    if args.stopwords:
        stop = text.load_stopwords(args.stopwords)
        pairs = text.filter_stopword_errors(pairs, stop, args.granularity)
    counts = tuple(int(c) for c in args.counts.split(","))
    if len(counts) != 3:
        raise CLIError(f"--counts needs three comma-separated integers, got {args.counts!r}")
    split = text.split_dataset(pairs, counts, args.seed)
    out = _out_dir(args)
    split.save(out)
    _write_run_config(args, out)
    log.info("%d pairs after filtering; split %s -> %s", len(pairs), counts, out)


def _load_split(args, name):
    path = getattr(args, name)
    _need(path)
    return text.load_pairs(path, skip_invalid=args.skip_invalid)


def cmd_pretrain(args):
    _need(args.vocab)
    vocab = text.Vocabulary.load(args.vocab)
    train, dev = _load_split(args, "train"), _load_split(args, "dev")
    cfg = enc.preset_config(args.preset, len(vocab), max_len=args.max_len) if args.max_len else \
        enc.preset_config(args.preset, len(vocab))
    model = CTDModel.init(cfg, vocab, args.variant, np.random.default_rng(args.seed))
    result = trainer.train_stage(model, train, dev, _train_config(args, "mlm"))
    out = _out_dir(args)
    trainer.save_checkpoint(result.model, out / "mlm.ckpt")
    trainer.write_history(result.history, out / "history_mlm.csv")
    _write_run_config(args, out)
    log.info("MLM stage: best epoch %d, dev loss %.4f -> %s", result.best_epoch, result.best_metric, out / "mlm.ckpt")


def cmd_train(args):
    _need(args.vocab, args.init)
    vocab = text.Vocabulary.load(args.vocab)
    train, dev = _load_split(args, "train"), _load_split(args, "dev")
    init = trainer.load_checkpoint(args.init, vocab=vocab)
    model = init.with_variant(args.variant, np.random.default_rng(args.seed + 1))
    try:
        result = trainer.train_stage(model, train, dev, _train_config(args, "ctd"))
    except trainer.TrainingDiverged as exc:
        out = _out_dir(args)
        trainer.save_checkpoint(exc.result.model, out / f"{args.variant}.last_good.ckpt")
        raise
    out = _out_dir(args)
    trainer.save_checkpoint(result.model, out / f"{args.variant}.ckpt")
    trainer.write_history(result.history, out / f"history_{args.variant}.csv")
    _write_run_config(args, out)
    log.info("%s head: best epoch %d, dev F1 %.4f -> %s", args.variant, result.best_epoch, result.best_metric,
             out / f"{args.variant}.ckpt")


def cmd_correct(args):
    _need(args.checkpoint, args.input)
    if (args.input is None) == (args.query is None):
        raise CLIError("give exactly one of --input or --query")
    model = trainer.load_checkpoint(args.checkpoint)
    queries = [args.query] if args.query is not None else _read_lines(args.input)
    results = correct_batch(queries, model, args.mode, args.threshold)
    lines = "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in results)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(lines, encoding="utf-8")
        _write_run_config(args, out.parent)
    else:
        sys.stdout.write(lines)


def cmd_evaluate(args):
    _need(args.checkpoint)
    model = trainer.load_checkpoint(args.checkpoint)
    pairs = _load_split(args, "test")
    report = ev.evaluate_model(model, pairs, args.mode, args.threshold)
    out = _out_dir(args)
    name = args.name or model.variant
    ev.emit_report(report, out / "report.json", "json")
    ev.emit_report(report, out / "report.csv", "csv")
    ev.emit_report(report, out / "report.md", "markdown-table", name=name)
    _write_run_config(args, out)
    sys.stdout.write(json.dumps(report.summary()) + "\n")


def cmd_inspect_sim(args):
    _need(args.checkpoint)
    model = trainer.load_checkpoint(args.checkpoint)
    sm = ev.similarity_matrix(args.query, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sm.to_csv(out)
    _write_run_config(args, out.parent)


def cmd_gradcheck(args):
    from .gradcheck import end_to_end_check

    failed = False
    for seed in range(args.seed, args.seed + args.n_seeds):
        report = end_to_end_check(seed, h=args.h)
        sys.stdout.write(f"seed {seed}\n{report.table()}\n\n")
        failed |= not report.passed
    if failed:
        raise CLIError("gradient check failed")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--log-level", default="INFO")

    model_opts = _Parser(add_help=False)
    model_opts.add_argument("--preset", choices=sorted(enc.PRESETS), default="toy")
    model_opts.add_argument("--skip-invalid", action="store_true", help="drop malformed pair lines instead of failing")
    model_opts.add_argument("--batch-size", type=int)
    model_opts.add_argument("--max-epochs", type=int)
    model_opts.add_argument("--patience", type=int)
    model_opts.add_argument("--peak-lr", type=float)
    model_opts.add_argument("--max-steps", type=int)

    infer = _Parser(add_help=False)
    infer.add_argument("--mode", choices=["argmax", "threshold"], default="argmax")
    infer.add_argument("--threshold", type=float, default=0.5)

    parser = _Parser(prog="ctd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-corpus", parents=[common], help="write the synthetic grammar corpus and tables")
    p.add_argument("--n-sentences", type=int, default=7000)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("build-vocab", parents=[common], help="character vocabulary from text or pair files")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("gen-data", parents=[common], help="inject errors, filter, split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--confusion", required=True)
    p.add_argument("--stopwords")
    p.add_argument("--granularity", choices=["char", "word"], default="char")
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--counts", default="4965,1000,1000")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common, model_opts], help="MLM stage on the gold side of pairs")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--max-len", type=int)
    p.add_argument("--variant", choices=VARIANTS, default="ctd")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common, model_opts], help="correction stage from an MLM checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="ctd")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", parents=[common, infer], help="correct queries, JSONL out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input")
    p.add_argument("--query")
    p.add_argument("--out", help="JSONL path; stdout when omitted")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("evaluate", parents=[common, infer], help="sentence-level report on a pair file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--name")
    p.add_argument("--skip-invalid", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-sim", parents=[common], help="cosine similarity CSV for one query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_sim)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path is not None and argv and not argv[0].startswith("-"):
        sub = parser._subparsers._group_actions[0].choices.get(argv[0])
        if sub is not None:
            _apply_config(sub, Path(path), argv[0])
    return parser.parse_args(argv)


def _apply_config(sub: argparse.ArgumentParser, path: Path, command: str) -> None:
    """Use a JSON file as defaults for ``sub``; explicit flags still win."""
    if not path.exists():
        _fail("FileNotFoundError", f"no such config file: {path}")
    try:
        defaults = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _fail("ConfigError", f"{path}: {exc}")
    if not isinstance(defaults, dict):
        _fail("ConfigError", f"{path}: expected a JSON object")
    if defaults.pop("command", command) != command:
        _fail("ConfigError", f"{path}: config was written by a different command")
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(defaults) - known)
    if unknown:
        _fail("ConfigError", f"{path}: unknown option(s) {unknown} for {command}")
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, FileNotFoundError, text.PairFormatError, trainer.CheckpointError, ValueError, OSError) as exc:
        _fail(type(exc).__name__, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
