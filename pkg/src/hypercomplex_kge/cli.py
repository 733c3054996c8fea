"""Command-line entry point: ``train``, ``eval``, ``ensemble`` and ``verify``.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 failed
verification.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .evaluation import HEAD_AND_TAIL, TAIL_ONLY, RankingError, evaluate
from .graphstore import TripleParseError, load_dataset, resolve_dataset
from .models import ModelConfigError
from .train import CheckpointError, TrainConfig, fit, load_checkpoint, save_checkpoint, write_epoch_log
from .verify import CHECKS, run_all

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_VERIFY = 3

MODES = {"head-and-tail": HEAD_AND_TAIL, "tail-only": TAIL_ONLY}
BUNDLED_DATA = Path(__file__).resolve().parents[2] / "datasets"

logger = logging.getLogger("hypercomplex_kge")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not argparse's default exit status 2
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def parse_config_file(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (x.strip() for x in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items())


# flags that map one-to-one onto TrainConfig fields
_FLAG_FIELDS = {
    "model": "model_kind",
    "norm": "norm_mode",
    "d": "d",
    "epochs": "epochs",
    "seed": "seed",
    "lr": "lr",
    "batch_size": "batch_size",
    "label_smoothing": "label_smoothing",
    "precision": "precision",
}


def resolve_config(args) -> TrainConfig:
    """Built-in defaults, overridden by ``--config`` file, overridden by flags and ``--set``."""
    values = parse_config_file(args.config) if args.config else {}
    for flag, key in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def find_dataset(name) -> Path:
    path = resolve_dataset(name)
    if not path.is_dir() and (BUNDLED_DATA / name).is_dir():
        path = BUNDLED_DATA / name
    if not path.is_dir():
        raise FileNotFoundError(f"dataset {name!r} not found (looked in ., $HCKGE_DATA and {BUNDLED_DATA})")
    return path


class OutputDir:
    """Write into a hidden sibling directory and rename it into place on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self) -> Path:
        if self.target.exists() and any(self.target.iterdir()):
            raise FileExistsError(f"output directory {self.target} exists and is not empty")
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            self.target.rmdir()
        os.replace(self.tmp, self.target)
        return False


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _report_text(report, split) -> str:
    return f"split: {split}\n" + report.to_text()


def cmd_train(args) -> int:
    config = resolve_config(args)
    mode = MODES[args.mode]
    store = load_dataset(find_dataset(args.dataset))
    with OutputDir(args.out) as out:
        _write(out / "config.txt", format_config(config))
        best = {"mrr": -1.0, "epoch": 0, "params": None}

        def on_epoch(epoch, params, log):
            logger.info("epoch %d\tloss %.6f\t%.2fs", epoch, log.loss, log.seconds)
            if args.select == "best-valid" and epoch % args.eval_every == 0:
                mrr = evaluate(params, store, mode, "valid", threads=args.threads).mrr
                if mrr > best["mrr"]:
                    best.update(mrr=mrr, epoch=epoch, params=params.copy())

        params, logs = fit(store, config, callback=on_epoch)
        if args.select == "best-valid" and best["params"] is not None:
            logger.info("selected epoch %d (valid MRR %.4f)", best["epoch"], best["mrr"])
            params = best["params"]
        save_checkpoint(params, out / "model.ckpt")
        write_epoch_log(logs, out / "epochs.tsv")
        for split in ("valid", "test"):
            if not len(store.raw(split)):
                continue
            report = evaluate(params, store, mode, split, threads=args.threads)
            text = _report_text(report, split)
            _write(out / f"report_{split}.txt", text)
            print(text, end="")
    return EXIT_OK


def cmd_eval(args, min_models=1) -> int:
    if len(args.checkpoint) < min_models:
        raise ConfigError(f"need at least {min_models} checkpoints, got {len(args.checkpoint)}")
    store = load_dataset(find_dataset(args.dataset))
    models = [load_checkpoint(p, store) for p in args.checkpoint]
    report = evaluate(
        models[0] if len(models) == 1 else models,
        store,
        MODES[args.mode],
        args.split,
        per_relation=args.per_relation or args.split_direction,
        split_direction=args.split_direction,
        threads=args.threads,
    )
    text = _report_text(report, args.split)
    print(text, end="")
    if report.per_relation:
        print(report.to_table(), end="")
    if args.out:
        with OutputDir(args.out) as out:
            _write(out / f"report_{args.split}.txt", text)
            if report.per_relation:
                _write(out / f"per_relation_{args.split}.tsv", report.to_table())
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(args.group or None)
    for res in results:
        print(res.line())
    failed = [r.group for r in results if not r.passed]
    print("all groups passed" if not failed else f"failed: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_VERIFY


def _add_eval_options(p):
    p.add_argument("--dataset", required=True, help="dataset directory or name under $HCKGE_DATA")
    p.add_argument("--checkpoint", action="append", default=[], required=True, help="repeat for an ensemble")
    p.add_argument("--ensemble", dest="checkpoint", action="append", help="additional checkpoint to average")
    p.add_argument("--mode", choices=sorted(MODES), default="head-and-tail")
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--per-relation", action="store_true")
    p.add_argument("--split-direction", action="store_true", help="report head and tail queries separately")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="optional directory for the report files")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hckge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and report valid/test metrics")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    t.add_argument("--config", help="key=value file of TrainConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any TrainConfig field")
    t.add_argument("--model")
    t.add_argument("--norm", choices=["batch", "unit", "none"])
    t.add_argument("--d", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--label-smoothing", type=float)
    t.add_argument("--precision", type=int, choices=[32, 64])
    t.add_argument("--mode", choices=sorted(MODES), default="head-and-tail")
    t.add_argument("--select", choices=["final", "best-valid"], default="final", help="checkpoint selection")
    t.add_argument("--eval-every", type=int, default=10, help="validation interval for --select best-valid")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one checkpoint (or several, averaged)")
    _add_eval_options(e)
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="evaluate the score average of several checkpoints")
    _add_eval_options(en)
    en.set_defaults(func=lambda a: cmd_eval(a, min_models=2))

    v = sub.add_parser("verify", help="run the invariant battery")
    v.add_argument("--group", action="append", choices=sorted(CHECKS))
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except (ConfigError, ModelConfigError, RankingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, TripleParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
