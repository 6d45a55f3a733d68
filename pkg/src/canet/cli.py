"""Command-line entry point.

Subcommands: prepare (parse or generate a corpus and write canonical
splits), train (fit one model variant and write a checkpoint plus an epoch
history), eval (score a checkpoint on a split), visualize (attention
heatmap documents and figures), compare (multi-run tables and curves).

Flags may also be given in a flat ``key = value`` config file passed with
--config; explicit flags win over file values.  CANET_DATA_ROOT provides a
default location for raw corpus files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
abort during training.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

from . import corpus as cp
from . import reports as rp
from .evaluation import EvaluationError, evaluate_model
from .network import (ConfigError, ModelConfig, Network, VARIANTS,
                      config_for_variant)
from .training import (Checkpoint, TrainConfig, TrainingDiverged,
                       load_checkpoint, read_history, save_checkpoint, train,
                       write_history)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_ENCODERS = ("lstm-avg", "at", "atae")
_REG_KINDS = ("none", "Rs", "Ro")

_INT_KEYS = {"seed", "epochs", "d", "batch_size", "patience", "limit",
             "multi_task", "synthetic_sentences", "synthetic_categories",
             "synthetic_vocab"}
_FLOAT_KEYS = {"lam", "lr", "dropout", "target_train_acc"}
_KEY_ALIASES = {"lambda": "lam", "learning_rate": "lr"}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments are skipped."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        key = _KEY_ALIASES.get(key, key)
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def _convert(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"config value for '{key}' is not numeric: {value!r}") from exc
    return value


def _merge_config(args: argparse.Namespace):
    """File values fill in flags left unset; unrelated keys are ignored so
    one file can serve several subcommands."""
    if getattr(args, "config", None) is None:
        return
    for key, value in read_config_file(args.config).items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, _convert(key, value))


def _apply_defaults(args: argparse.Namespace, defaults: dict):
    for key, value in defaults.items():
        if getattr(args, key) is None:
            setattr(args, key, value)


def _require(args: argparse.Namespace, *keys: str):
    for key in keys:
        if getattr(args, key) is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _data_root() -> Path:
    root = os.environ.get("CANET_DATA_ROOT")
    if root is None:
        raise ConfigError("no --train-xml/--test-xml given and CANET_DATA_ROOT "
                          "is not set")
    return Path(root)


def _safe_name(raw: str) -> str:
    return re.sub(r"[^\w.-]", "_", raw)


# ---------------------------------------------------------------------------
# prepare


def _summary_counts(instances: list[cp.Instance]) -> dict[str, int]:
    counts = {"total": len(instances), "single": 0, "multi": 0,
              "multi_overlapping": 0, "multi_non_overlapping": 0}
    for inst in instances:
        if len(inst.mentions) == 1:
            counts["single"] += 1
        else:
            counts["multi"] += 1
            if inst.overlap == cp.OVERLAPPING:
                counts["multi_overlapping"] += 1
            elif inst.overlap == cp.NON_OVERLAPPING:
                counts["multi_non_overlapping"] += 1
    return counts


def _write_summary(path: Path, splits: dict[str, list[cp.Instance]]):
    fields = ("total", "single", "multi", "multi_overlapping",
              "multi_non_overlapping")
    lines = ["split\t" + "\t".join(fields)]
    for name, instances in splits.items():
        counts = _summary_counts(instances)
        lines.append(name + "\t" + "\t".join(str(counts[f]) for f in fields))
    path.write_text("\n".join(lines) + "\n")


def cmd_prepare(args: argparse.Namespace) -> int:
    _merge_config(args)
    _apply_defaults(args, {"seed": 0, "synthetic_sentences": 200,
                           "synthetic_categories": 5, "synthetic_vocab": 60})
    _require(args, "dataset", "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.dataset == "synthetic":
        n = args.synthetic_sentences
        pool, _ = cp.make_synthetic_corpus(
            n, args.synthetic_categories, args.synthetic_vocab, seed=args.seed)
        test = cp.make_synthetic_corpus(
            max(1, n // 5), args.synthetic_categories, args.synthetic_vocab,
            seed=args.seed + 1000)[0]
        train_insts, val_insts = cp.split_train_val(pool, args.seed)
    else:
        parse = cp.parse_semeval14 if args.dataset == "rest14" else cp.parse_semeval15
        train_xml = args.train_xml or _data_root() / args.dataset / "train.xml"
        test_xml = args.test_xml or _data_root() / args.dataset / "test.xml"
        pool = parse(train_xml)
        test = parse(test_xml)
        if args.overlap_annotations is not None:
            merged = cp.merge_overlap_annotations(pool + test,
                                                  args.overlap_annotations)
            pool, test = merged[:len(pool)], merged[len(pool):]
        train_insts, val_insts = cp.split_train_val(pool, args.seed)

    vocab = cp.build_vocab(train_insts + val_insts)
    categories = cp.category_inventory(train_insts + val_insts + test)

    splits = {"train": train_insts, "val": val_insts, "test": test}
    for name, instances in splits.items():
        (out / f"{name}.jsonl").write_text(cp.dump_instances(instances))
    (out / "vocab.txt").write_text("\n".join(vocab.to_lines()) + "\n")
    (out / "categories.txt").write_text("\n".join(categories) + "\n")
    _write_summary(out / "summary.tsv", splits)
    manifest = [f"dataset = {args.dataset}", f"seed = {args.seed}",
                f"vocab_size = {len(vocab)}", f"n_categories = {len(categories)}"]
    manifest += [f"n_{name} = {len(instances)}" for name, instances in splits.items()]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")

    for name, instances in splits.items():
        print(f"{name}: {len(instances)} sentences")
    print(f"vocabulary: {len(vocab)} words; categories: {len(categories)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared data loading


def _load_prepared(data_dir, split: str):
    base = Path(data_dir)
    split_path = base / f"{split}.jsonl"
    for required in (split_path, base / "vocab.txt", base / "categories.txt"):
        if not required.exists():
            raise CliDataError(f"prepared corpus file missing: {required}")
    instances = cp.load_instances(split_path.read_text())
    vocab = cp.Vocabulary.from_lines((base / "vocab.txt").read_text().splitlines())
    categories = [line for line in
                  (base / "categories.txt").read_text().splitlines() if line]
    return instances, vocab, categories


class CliDataError(cp.CorpusError):
    """Missing or unreadable input files."""


# ---------------------------------------------------------------------------
# train


def _model_config(args, vocab_size: int, n_categories: int) -> ModelConfig:
    n_classes = len(cp.polarity_classes(args.mode))
    common = dict(lam=args.lam, n_classes=n_classes, d=args.d,
                  vocab_size=vocab_size, n_categories=n_categories,
                  gram=args.gram)
    if args.variant != "custom":
        return config_for_variant(args.variant, **common)
    _apply_defaults(args, {"encoder": "at", "multi_task": 0,
                           "reg_alsc": "none", "reg_acd": "none"})
    return ModelConfig(variant=args.encoder, multi_task=bool(args.multi_task),
                       reg_alsc=args.reg_alsc, reg_acd=args.reg_acd, **common)


def cmd_train(args: argparse.Namespace) -> int:
    _merge_config(args)
    _apply_defaults(args, {"mode": "3way", "seed": 0, "lam": 0.1, "epochs": 100,
                           "d": 300, "gram": "KxK", "lr": 0.01,
                           "batch_size": 25, "dropout": 0.7, "patience": 10})
    _require(args, "data", "variant", "out")

    train_insts, vocab, categories = _load_prepared(args.data, "train")
    val_insts, _, _ = _load_prepared(args.data, "val")
    train_set = cp.encode_instances(train_insts, vocab, categories, args.mode)
    val_set = cp.encode_instances(val_insts, vocab, categories, args.mode)
    if not train_set or not val_set:
        raise CliDataError(f"no usable sentences after encoding under mode "
                           f"'{args.mode}'")

    model_config = _model_config(args, len(vocab), len(categories))
    train_config = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, dropout=args.dropout,
        max_epochs=args.epochs, patience=min(args.patience, args.epochs),
        seed=args.seed, target_train_acc=args.target_train_acc)

    embeddings = None
    if args.embeddings is not None:
        embeddings, coverage = cp.load_embeddings(args.embeddings, vocab,
                                                  args.d, seed=args.seed)
        print(f"embeddings: {coverage:.1%} of the vocabulary covered")

    best, history = train(train_set, val_set, model_config, train_config,
                          word_embeddings=embeddings)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.txt").write_text(save_checkpoint(best))
    (out / "history.tsv").write_text(write_history(history))
    resolved = {"variant": args.variant, "mode": args.mode, "seed": args.seed,
                "lambda": args.lam, "epochs": args.epochs, "d": args.d,
                "gram": args.gram, "lr": args.lr, "batch_size": args.batch_size,
                "dropout": args.dropout, "patience": train_config.patience}
    (out / "run_config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in resolved.items()))

    print(f"trained {len(history)} epochs; best epoch {best.epoch}: "
          f"val_acc={best.metrics['val_acc']:.4f} "
          f"val_f1={best.metrics['val_f1']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_net(path) -> tuple[Checkpoint, Network]:
    ckpt_path = Path(path)
    if not ckpt_path.exists():
        raise CliDataError(f"checkpoint file missing: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path.read_text())
    return ckpt, ckpt.restore()


def _mode_of(config: ModelConfig) -> str:
    return "3way" if config.n_classes == 3 else "binary"


def cmd_eval(args: argparse.Namespace) -> int:
    _merge_config(args)
    _apply_defaults(args, {"split": "test"})
    _require(args, "checkpoint", "data")
    ckpt, net = _load_net(args.checkpoint)
    mode = _mode_of(ckpt.model_config)

    instances, vocab, categories = _load_prepared(args.data, args.split)
    if len(vocab) != ckpt.model_config.vocab_size:
        raise ConfigError(f"checkpoint was trained with vocab_size="
                          f"{ckpt.model_config.vocab_size} but the prepared "
                          f"corpus has {len(vocab)} words")
    if len(categories) != ckpt.model_config.n_categories:
        raise ConfigError(f"checkpoint expects {ckpt.model_config.n_categories} "
                          f"categories but the prepared corpus has "
                          f"{len(categories)}")
    encoded = cp.encode_instances(instances, vocab, categories, mode)
    if not encoded:
        raise CliDataError(f"split '{args.split}' has no usable sentences "
                           f"under mode '{mode}'")

    report, acd = evaluate_model(net, encoded, mode)
    text = rp.metrics_tsv(report, acd)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# visualize


def cmd_visualize(args: argparse.Namespace) -> int:
    _merge_config(args)
    _apply_defaults(args, {"split": "test", "limit": 8})
    _require(args, "checkpoint", "data", "out")
    ckpt, net = _load_net(args.checkpoint)
    mode = _mode_of(ckpt.model_config)

    instances, vocab, categories = _load_prepared(args.data, args.split)
    encoded = cp.encode_instances(instances, vocab, categories, mode)
    if args.ids is not None:
        wanted = [s for s in args.ids.split(",") if s]
        by_id = {e.id: e for e in encoded}
        missing = [s for s in wanted if s not in by_id]
        if missing:
            raise CliDataError(f"sentence ids not found in split "
                               f"'{args.split}': {', '.join(missing)}")
        encoded = [by_id[s] for s in wanted]
    else:
        encoded = encoded[:args.limit]
    if not encoded:
        raise CliDataError("nothing to visualize")

    docs = rp.build_heatmaps(net, encoded, categories, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attention.html").write_text(rp.render_heatmap_html(docs))
    (out / "attention.txt").write_text(rp.render_heatmap_text(docs))
    for doc in docs:
        rp.heatmap_figure(doc, str(out / f"{_safe_name(doc.sentence_id)}.png"))
    print(f"wrote attention documents for {len(docs)} sentences to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def _run_mode(run_dir: Path) -> str | None:
    metrics = run_dir / "metrics.tsv"
    if not metrics.exists():
        return None
    for line in metrics.read_text().splitlines():
        key, _, value = line.partition("\t")
        if key == "mode":
            return value
    return None


def cmd_compare(args: argparse.Namespace) -> int:
    _merge_config(args)
    _require(args, "out")
    if not args.runs:
        raise ConfigError("compare needs at least one --runs directory")

    histories: dict[str, list] = {}
    modes: dict[str, str] = {}
    for raw in args.runs:
        run_dir = Path(raw)
        history_path = run_dir / "history.tsv"
        if not history_path.exists():
            raise CliDataError(f"run history missing: {history_path}")
        name = run_dir.name or str(run_dir)
        if name in histories:
            raise ConfigError(f"duplicate run name '{name}'")
        histories[name] = read_history(history_path.read_text())
        mode = _run_mode(run_dir)
        if mode is not None:
            modes[name] = mode

    table, curves = rp.compare_runs(histories, modes or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.tsv").write_text(table)
    (out / "curves.tsv").write_text(curves)
    rp.curves_figure(histories, str(out / "curves.png"))
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canet",
        description="Aspect-level sentiment models with constrained attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value file; flags override")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("prepare", help="parse or generate a corpus and write "
                                       "canonical splits")
    add_common(p)
    p.add_argument("--dataset", choices=("rest14", "rest15", "synthetic"))
    p.add_argument("--train-xml", help="raw training file (default under "
                                       "CANET_DATA_ROOT)")
    p.add_argument("--test-xml")
    p.add_argument("--overlap-annotations",
                   help="sentence-id to OL/NOL sidecar file")
    p.add_argument("--synthetic-sentences", type=int)
    p.add_argument("--synthetic-categories", type=int)
    p.add_argument("--synthetic-vocab", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit one variant and write checkpoint "
                                     "plus history")
    add_common(p)
    p.add_argument("--data", help="directory written by prepare")
    p.add_argument("--variant", choices=tuple(VARIANTS) + ("custom",))
    p.add_argument("--encoder", choices=_ENCODERS,
                   help="custom variant only")
    p.add_argument("--multi-task", type=int, choices=(0, 1),
                   help="custom variant only")
    p.add_argument("--reg-alsc", choices=_REG_KINDS, help="custom variant only")
    p.add_argument("--reg-acd", choices=_REG_KINDS, help="custom variant only")
    p.add_argument("--mode", choices=("3way", "binary"))
    p.add_argument("--lambda", dest="lam", type=float,
                   help="attention penalty weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--gram", choices=("KxK", "LxL"))
    p.add_argument("--embeddings", help="word vector text file")
    p.add_argument("--d", type=int, help="hidden and embedding width")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--target-train-acc", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a prepared split")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="attention heatmap documents and "
                                         "figures")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--ids", help="comma-separated sentence ids")
    p.add_argument("--limit", type=int, help="sentences to render when --ids "
                                             "is not given")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("compare", help="tables and curves across run "
                                       "directories")
    add_common(p)
    p.add_argument("--runs", nargs="+", help="run directories from train")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cp.CorpusError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
