"""Command line entry point: ``dvq {gen-data,train,eval,analyze,bound}``.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure during training. Set ``DVQ_LOG`` (DEBUG, INFO, WARNING) for logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bounds import format_table, stats_from_dict, tradeoff_report
from .checkpoint import Checkpoint, CheckpointVersionError, dumps
from .config import ConfigError, RunConfig, load_config
from .tasks.analysis import correlation_analysis
from .tasks.data import generate, read_jsonl, write_jsonl
from .tasks.train import NonFiniteLossError, evaluate_model, rows_csv, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
SPLITS = ("train", "val", "test")

log = logging.getLogger("dvq")


class UsageError(ValueError):
    pass


def _setup_logging():
    level = os.environ.get("DVQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output.dir if cfg else ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"--out {out}: cannot create directory ({err.strerror})") from err
    return out


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as err:
        raise UsageError(f"cannot write {path}: {err.strerror}") from err


def _config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.task.seed = args.seed
    return cfg


def _load_datasets(path: Path, cfg: RunConfig) -> dict:
    out = {}
    for split in SPLITS:
        f = path / f"{split}.jsonl"
        if f.exists():
            out[split] = read_jsonl(f)
    missing = {"train", "val"} - set(out)
    if missing:
        raise UsageError(f"--dataset {path}: missing {sorted(missing)} split files")
    ds = out["train"]
    if ds.kind != cfg.task.kind or ds.A != cfg.task.A or ds.V != cfg.task.V:
        raise UsageError(f"--dataset {path}: kind/A/V ({ds.kind}, {ds.A}, {ds.V}) do not match the task block")
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    datasets = generate(cfg.task)
    for split in SPLITS:
        try:
            n = write_jsonl(datasets[split], out / f"{split}.jsonl")
        except OSError as err:
            raise UsageError(f"cannot write {out / f'{split}.jsonl'}: {err.strerror}") from err
        print(f"{split}: {n}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    datasets = _load_datasets(Path(args.dataset), cfg) if args.dataset else None
    record, ckpt = train_model(cfg.task, cfg.model, cfg.optim, cfg.task.seed,
                               datasets=datasets, config=cfg)
    ckpt_path = out / "checkpoint.json"
    _write(ckpt_path, dumps(ckpt.to_dict()))
    if "csv" in cfg.output.formats:
        _write(out / "metrics.csv", record.metrics_csv())
        _write(out / "val_rows.csv", rows_csv(record.eval_rows))
    if "json" in cfg.output.formats:
        summary = {"format_version": ckpt.format_version, "val_accuracy": record.val_accuracy,
                   "val_capacity_mean": record.val_capacity, "epochs": len(record.epochs)}
        _write(out / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"val accuracy: {record.val_accuracy:.6f}")
    print(f"val mean capacity: {record.val_capacity:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _eval_inputs(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except OSError as err:
        raise UsageError(f"--checkpoint {args.checkpoint}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"--checkpoint {args.checkpoint}: not valid JSON ({err})") from err
    model = ckpt.to_model()
    if args.dataset:
        path = Path(args.dataset)
        ds = read_jsonl(path / "val.jsonl" if path.is_dir() else path)
    else:
        ds = generate(ckpt.run_config().task)["val"]
    return model, ds


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.6f}"


def cmd_eval(args) -> int:
    model, ds = _eval_inputs(args)
    rows, acc = evaluate_model(model, ds)
    out = _out_dir(args)
    _write(out / "rows.csv", rows_csv(rows))
    print(f"accuracy: {acc:.6f}")
    print(f"rows: {out / 'rows.csv'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, ds = _eval_inputs(args)
    rows, acc = evaluate_model(model, ds)
    corr = correlation_analysis(rows, n_perm=args.permutations, seed=args.perm_seed)
    report = {"format_version": 1, "accuracy": acc, "n_permutations": args.permutations,
              "correlations": {k: {**v, "status": "ok" if v["defined"] else "undefined"}
                               for k, v in corr.items()}}
    out = _out_dir(args)
    _write(out / "rows.csv", rows_csv(rows))
    _write(out / "correlations.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"accuracy: {acc:.6f}")
    for name, v in corr.items():
        print(f"{name}: {_fmt(v['coefficient'])} (p={_fmt(v['p_value'])})")
    return EXIT_OK


def cmd_bound(args) -> int:
    if not args.stats:
        raise UsageError("--stats is required")
    try:
        data = json.loads(Path(args.stats).read_text())
    except OSError as err:
        raise UsageError(f"--stats {args.stats}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"--stats {args.stats}: not valid JSON ({err})") from err
    version = data.get("format_version", 1)
    if version != 1:
        raise UsageError(f"--stats: format_version {version} not supported (expected 1)")
    stats, fixed = stats_from_dict(data)
    report = tradeoff_report(stats, fixed)
    payload = json.dumps({"format_version": 1, **report.to_dict()}, sort_keys=True, indent=2) + "\n"
    print(format_table(report))
    print()
    print(payload, end="")
    if args.out:
        _write(_out_dir(args) / "bound.json", payload)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "analyze": cmd_analyze, "bound": cmd_bound}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvq", description="Dynamic vector-quantization bottlenecks")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        if "config" in flags:
            p.add_argument("--config", help="run configuration JSON")
            p.add_argument("--seed", type=int, help="override task.seed (also seeds training)")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint", help="checkpoint JSON written by train")
        if "dataset" in flags:
            p.add_argument("--dataset", help="dataset directory (train) or JSONL file / directory (eval)")
        if "stats" in flags:
            p.add_argument("--stats", help="usage statistics JSON")
        p.add_argument("--out", help="output directory")
        return p

    add("gen-data", "write train/val/test JSON-lines datasets", "config")
    add("train", "train a model and write checkpoint and metrics", "config", "dataset")
    add("eval", "per-sample evaluation rows", "checkpoint", "dataset")
    p = add("analyze", "evaluation rows plus correlation report", "checkpoint", "dataset")
    p.add_argument("--permutations", type=int, default=10_000)
    p.add_argument("--perm-seed", type=int, default=0)
    add("bound", "generalization-bound report", "stats")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointVersionError, UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
