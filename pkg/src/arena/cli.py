"""Command-line driver: ``arena run|sweep|pretrain|report``.

Exit codes: 0 success, 2 configuration or input error, 3 a run aborted on
a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import load_config
from .errors import ConfigError, TrainingAborted
from .harness import (
    CSV_COLUMNS, atomic_write, aggregate, read_jsonl, run_many, summary_rows, with_overrides,
    write_csv, write_jsonl,
)
from .linalg import Rng
from .tasks import pretrain_toy_model, save_model


log = logging.getLogger("arena")


EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
OUT_ENV = "ARENA_OUT"
SWEEP_AXES = {"rank_init": "adapter.r_init", "lambda": "prox.lam", "K": "task.K"}
CELL_KEYS = ("task", "strategy", "K", "r_init", "lambda")


def parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds: no seeds given")
    return seeds


def parse_values(text, axis):
    cast = float if axis == "lambda" else int
    try:
        values = [cast(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: cannot parse {text!r} for axis {axis}") from exc
    if not values:
        raise ConfigError("--values: empty value list")
    return values


def resolve(args):
    cfg = load_config(args.config, args.set)
    if args.seeds:
        cfg = with_overrides(cfg, seeds=parse_seeds(args.seeds))
    return cfg


def out_dir(args, cfg):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.name


def provenance(cfg):
    return json.dumps({"version": __version__, "config": cfg.to_dict()}, sort_keys=True)


def _row(result):
    return dict(result.csv_row(), **{"lambda": result.config["prox"]["lambda"]})


def emit(results, cfg, out, plot=None):
    """Write results.jsonl, summary.csv and, for sweeps, a plot-data CSV."""
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "results.jsonl", results)
    rows = [_row(r) for r in results]
    write_csv(out / "summary.csv", rows, CSV_COLUMNS + ("lambda",), header_comment=provenance(cfg))
    if plot:
        axis, key = plot
        metric = aggregate(rows, keys=("strategy", key))
        rank = aggregate(rows, keys=("strategy", key), value="final_rank")
        series = []
        for cell, stats in sorted(metric.cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            rk = rank.cells.get(cell, {})
            series.append({"strategy": cell[0], axis: cell[1], "metric_mean": stats["mean"],
                           "metric_std": stats["std"], "rank_mean": rk.get("mean"), "n": stats["n"]})
        write_csv(out / f"plot_{axis}.csv", series,
                  ("strategy", axis, "metric_mean", "metric_std", "rank_mean", "n"),
                  header_comment=provenance(cfg))
    aborted = [r for r in results if r.stop_reason == "abort"]
    for r in aborted:
        log.error("run %s seed %d aborted: non-finite values at %s", r.strategy, r.seed, r.abort_layer)
    log.info("wrote %d results to %s", len(results), out)
    return EXIT_ABORT if aborted else EXIT_OK


def cmd_run(args):
    cfg = resolve(args)
    results = run_many([(cfg, s) for s in cfg.seeds], args.jobs)
    for r in results:
        log.info("%s seed=%d %s=%s rank=%s epochs=%d (%s)", r.strategy, r.seed, r.metric_name,
                 r.final_metric, r.final_rank, r.epochs_ran, r.stop_reason)
    return emit(results, cfg, out_dir(args, cfg))


def cmd_sweep(args):
    cfg = resolve(args)
    values = parse_values(args.values, args.axis)
    if args.axis == "lambda" and 0.0 not in values:
        values = [0.0] + values
    if args.strategies:
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    elif args.axis == "rank_init":
        strategies = ["lora", "arena"]
    else:
        strategies = [cfg.strategy]
    key = SWEEP_AXES[args.axis]
    jobs = []
    for value in values:
        for strategy in strategies:
            variant = with_overrides(cfg, **{key: value, "strategy": strategy})
            jobs.extend((variant, s) for s in cfg.seeds)
    log.info("sweep %s over %s: %d runs", args.axis, values, len(jobs))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = run_many(jobs, args.jobs)
    plot_key = {"rank_init": "r_init", "lambda": "lambda", "K": "K"}[args.axis]
    return emit(results, cfg, out_dir(args, cfg), plot=(args.axis, plot_key))


def cmd_pretrain(args):
    cfg = resolve(args)
    if cfg.task.family != "segmentation":
        raise ConfigError("pretrain: task.family must be 'segmentation'")
    ms = cfg.model
    model = pretrain_toy_model(Rng(ms.pretrain_seed).split("pretrain"), epochs=ms.pretrain_epochs,
                               n_examples=ms.pretrain_examples, model_kind=cfg.model_kind,
                               hidden=ms.hidden, n_classes=cfg.task.n_classes)
    out = out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "pretrained.npz", model)
    atomic_write(out / "pretrained.json", provenance(cfg) + "\n")
    log.info("saved pre-trained %s model to %s", cfg.model_kind, out / "pretrained.npz")
    return EXIT_OK


def _fmt(stats, digits=4):
    return f"{stats['mean']:.{digits}f} ± {stats['std']:.{digits}f}"


def render_report(results):
    """Markdown tables (one per task) of mean ± std per cell; best metric bolded."""
    rows = [_row(r) for r in results]
    metric = aggregate(rows, keys=CELL_KEYS)
    rank = aggregate(rows, keys=CELL_KEYS, value="final_rank")
    kinds = {r.task: r.metric_name for r in results}
    versions = sorted({r.version for r in results})
    configs = sorted({json.dumps(r.config, sort_keys=True) for r in results})
    lines = ["# Results", "", f"Tool version: {', '.join(versions)}. Runs: {len(results)}.", ""]
    for task in sorted(kinds):
        cells = {c: s for c, s in metric.cells.items() if c[0] == task}
        if not cells:
            continue
        pick = max if kinds[task] == "dice" else min
        best = pick(s["mean"] for s in cells.values())
        lines += [f"## {task} ({kinds[task]})", "",
                  "| strategy | K | r_init | lambda | metric | final rank | n |",
                  "|---|---|---|---|---|---|---|"]
        for cell, stats in sorted(cells.items(), key=lambda kv: str(kv[0])):
            text = _fmt(stats)
            if stats["mean"] == best:
                text = f"**{text}**"
            rk = rank.cells.get(cell)
            lines.append(f"| {cell[1]} | {cell[2]} | {cell[3]} | {cell[4]} | {text} | "
                         f"{_fmt(rk, 1) if rk else '-'} | {stats['n']} |")
        lines.append("")
    lines += ["## Configurations", ""]
    lines += [f"```json\n{c}\n```" for c in configs]
    return "\n".join(lines) + "\n", metric


def cmd_report(args):
    root = Path(args.results)
    files = sorted(root.rglob("*.jsonl")) if root.is_dir() else ([root] if root.is_file() else [])
    results, bad = [], 0
    for path in files:
        got, nbad = read_jsonl(path)
        results += got
        bad += nbad
        if nbad:
            log.warning("%s: skipped %d corrupted line(s)", path, nbad)
    if not results:
        raise ConfigError(f"no results found under {root}")
    text, metric = render_report(results)
    out = Path(args.out) if args.out else (root if root.is_dir() else root.parent)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "report.md", text)
    rows = summary_rows(metric, CELL_KEYS)
    write_csv(out / "report.csv", rows, CELL_KEYS + ("mean", "std", "n"),
              header_comment=json.dumps({"version": __version__}))
    if not args.quiet:
        sys.stdout.write(text)
    log.info("report over %d results (%d corrupted lines skipped) written to %s", len(results), bad, out)
    return EXIT_OK


def _configure_logging(level):
    # fresh handler per call so it binds to the current stderr
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(level)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<name> or runs/<name>)")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-q", "--quiet", action="store_true")
    verbosity.add_argument("-v", "--verbose", action="store_true")

    with_config = argparse.ArgumentParser(add_help=False)
    with_config.add_argument("--config", required=True, help="JSON experiment config")
    with_config.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                             help="dotted override, e.g. prox.lambda=0.1 (repeatable)")
    with_config.add_argument("--seeds", help="comma-separated seeds, replaces the config's list")

    parser = argparse.ArgumentParser(prog="arena", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common, with_config], help="run one config over its seeds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common, with_config], help="sweep one axis")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--strategies", help="comma-separated; default lora,arena for rank_init")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pretrain", parents=[common, with_config], help="pre-train and save the toy model")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("report", parents=[common], help="markdown summary of a results directory")
    p.add_argument("results", help="directory (searched recursively) or a .jsonl file")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    _configure_logging(logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        log.error("aborted: %s", exc)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
