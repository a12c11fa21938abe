"""treexpert command line: gen, train, eval, report.

Exit codes: 0 success, 2 bad configuration, 3 numeric failure, 4 I/O or
checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import CheckpointError, ConfigError, GenerationError, NumericError, ParseError
from .tasks import SPLITS, TASK_KINDS, TaskSpec, make_dataset
from .trainer import (AGG_COLUMNS, RunReport, TrainConfig, aggregate, evaluate, load_dataset, steps_vs_params,
                      train, write_aggregate_csv)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("treexpert")


# ---------------------------------------------------------------------------
# config handling

def flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and key != "sizes":
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def parse_value(text: str):
    """TOML scalar/array if it parses as one, otherwise the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = parse_value(value.strip())
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return flatten(tomllib.load(fh))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def select_section(flat: dict, section: str, allowed: set[str]) -> dict:
    """Keys of ``flat`` for one section.  ``section.key`` and bare ``key`` are
    both accepted; keys of other sections are ignored; anything else is an
    error."""
    out, unknown = {}, []
    for key, value in flat.items():
        head, dot, rest = key.partition(".")
        if dot and head in ("task", "train"):
            if head == section:
                out[rest] = value
            continue
        if key.startswith("sizes.") and section == "task":
            out.setdefault("sizes", {})[key[6:]] = value
        elif key in allowed:
            out[key] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key in out:
        if key not in allowed:
            raise ConfigError(f"unknown {section} key {key!r}")
    return out


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _toml_value(value) -> str:
    if value is None:
        return '""  # unset'
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + " }"
    return repr(value)


def dump_effective(path, values: dict, section: str) -> None:
    lines = [f"[{section}]"]
    for key, value in values.items():
        if value is not None:
            lines.append(f"{key} = {_toml_value(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    flat = load_config(args.config)
    flat.update(parse_overrides(args.set))
    values = select_section(flat, "task", _names(TaskSpec))
    if args.task is not None:
        values["task_kind"] = args.task
    if args.seed is not None:
        values["seed"] = args.seed
    sizes = dict(TaskSpec().sizes)
    sizes.update(values.get("sizes", {}))
    if args.train_size is not None:
        sizes["train"] = args.train_size
    if args.test_size is not None:
        for split in SPLITS[1:]:
            sizes[split] = args.test_size
    values["sizes"] = sizes
    spec = TaskSpec(**values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    info = make_dataset(spec, out)
    print(json.dumps({"out": str(out), "counts": info["counts"], "vocab_hash": info["vocab_hash"]}))
    return EXIT_OK


def cmd_train(args) -> int:
    flat = load_config(args.config)
    flat.update(parse_overrides(args.set))
    values = select_section(flat, "train", _names(TrainConfig))
    for key in ("model_kind", "seed", "max_steps", "epochs", "d_model", "top_k", "lr", "batch_size"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.data is not None:
        values["task_path"] = args.data
    config = TrainConfig.from_dict(values)
    dataset = load_dataset(config.task_path)
    out = Path(args.out) if args.out else Path("runs") / f"{config.model_kind}_seed{config.seed}"
    out.mkdir(parents=True, exist_ok=True)
    dump_effective(out / "config.toml", config.to_dict(), "train")

    def progress(row):
        if not args.quiet:
            print(json.dumps(row), flush=True)

    report, _ = train(config, dataset, out, progress)
    print(json.dumps({"run_dir": str(out), "split_acc": report.split_acc,
                      "best_val_acc": report.best_val_acc, "excluded": report.excluded}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.split not in SPLITS:
        raise ConfigError(f"unknown split {args.split!r}; expected one of {SPLITS}")
    dataset = load_dataset(args.data)
    acc = evaluate(args.checkpoint, dataset, args.split, args.limit)
    writer = csv.writer(sys.stdout)
    writer.writerow(["checkpoint", "split", "accuracy"])
    writer.writerow([args.checkpoint, args.split, f"{acc:.6f}"])
    return EXIT_OK


def cmd_report(args) -> int:
    reports_by_task: dict[str, list[RunReport]] = {}
    for run_dir in sorted(glob.glob(args.runs)):
        summary = Path(run_dir) / "summary.json"
        config = Path(run_dir) / "config.toml"
        if not summary.exists():
            continue
        report = RunReport.from_dict(json.loads(summary.read_text()))
        task = ""
        if config.exists():
            with open(config, "rb") as fh:
                path = tomllib.load(fh).get("train", {}).get("task_path", "")
            manifest = Path(path) / "manifest.json"
            task = json.loads(manifest.read_text()).get("task_kind", "") if manifest.exists() else path
        reports_by_task.setdefault(task, []).append(report)
    rows = []
    for task, reports in reports_by_task.items():
        rows.extend(aggregate(reports, task))
    if args.out:
        write_aggregate_csv(args.out, rows)
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=AGG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    if args.params_out:
        with open(args.params_out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["model", "max_steps", "param_count"])
            writer.writeheader()
            writer.writerows(steps_vs_params())
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treexpert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a task dataset")
    p.add_argument("--task", choices=TASK_KINDS)
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int, help="size of each test split")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", help="dataset directory (overrides task_path)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--model", dest="model_kind")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test_id")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate run directories")
    p.add_argument("--runs", default="runs/*")
    p.add_argument("--out")
    p.add_argument("--params-out", help="also write the parameter-count-vs-steps table here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GenerationError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ParseError, OSError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
