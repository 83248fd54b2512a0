"""Experiment runner: task + model + strategy + optimizer -> RunResult.

A run is a pure function of ``(config, seed)``. The query set is read once,
after training stops; nothing consults it for model selection.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .adapters import attach_adapters, count_trainable, effective_rank, trainable_parameters
from .config import ExperimentConfig
from .errors import ConfigError, TrainingAborted
from .linalg import Rng
from .model_kit import (
    build_attention_model, build_linear_model, build_mlp, mse_loss, multiclass_dice_loss, soft_dice_loss,
)
from .prox_optimizer import EarlyStopState, OptimizerState, cosine_lr, regularizer, should_stop, train_step
from .tasks import N_FEATURES, default_pretrained, evaluate_segmentation, planted_rank_task, toy_segmentation_task

__all__ = [
    "EpochRecord",
    "RunResult",
    "build_run",
    "run_experiment",
    "run_many",
    "rank_init_sweep",
    "aggregate",
    "summary_rows",
    "write_jsonl",
    "write_csv",
    "read_jsonl",
    "atomic_write",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("task", "strategy", "K", "r_init", "seed", "final_metric", "final_rank",
               "params", "epochs", "stop_reason")

LOSSES = {"mse": mse_loss, "soft_dice": soft_dice_loss, "multiclass_dice": multiclass_dice_loss}


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    objective: float
    eta: float
    ranks: dict


@dataclass
class RunResult:
    config: dict
    seed: int
    strategy: str
    task: str
    K: int
    r_init: int | None
    metric_name: str
    final_metric: float | None
    final_ranks: dict
    params: int
    epochs_ran: int
    stop_reason: str
    history: list = field(default_factory=list)
    query_reads: int = 0
    abort_layer: str | None = None
    version: str = __version__

    @property
    def final_rank(self):
        return max(self.final_ranks.values()) if self.final_ranks else None

    @property
    def losses(self):
        return [h.loss for h in self.history]

    def to_dict(self):
        d = asdict(self)
        d["final_rank"] = self.final_rank
        return d

    def to_json(self):
        return json.dumps(_finite(self.to_dict()), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("final_rank", None)
        d["history"] = [EpochRecord(**h) for h in d.get("history", [])]
        return cls(**d)

    def csv_row(self):
        return {
            "task": self.task,
            "strategy": self.strategy,
            "K": self.K,
            "r_init": self.r_init,
            "seed": self.seed,
            "final_metric": self.final_metric,
            "final_rank": self.final_rank,
            "params": self.params,
            "epochs": self.epochs_ran,
            "stop_reason": self.stop_reason,
        }


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def task_label(cfg):
    t = cfg.task
    if t.family == "planted_rank":
        return f"planted_m{t.m}_n{t.n}_r{t.r_star}"
    return f"seg_{t.mode}" + (f"_c{t.n_classes}" if t.n_classes > 2 else "")


def build_run(cfg, seed):
    """Task and model (with adapters attached) for ``(cfg, seed)``."""
    rng = Rng(seed)
    t = cfg.task
    if t.family == "planted_rank":
        task, W0 = planted_rank_task(rng.split("task"), t.m, t.n, t.r_star, t.K, t.noise_sigma,
                                     t.query_size, t.spectrum)
        model = build_linear_model(W0)
    else:
        task = toy_segmentation_task(rng.split("task"), t.K, t.mode, t.n_query, t.image_noise, t.n_classes)
        out = "sigmoid" if t.n_classes == 2 else "softmax"
        n_out = 1 if t.n_classes == 2 else t.n_classes
        ms = cfg.model
        if cfg.model_kind == "mlp":
            model = build_mlp(Rng(0), N_FEATURES, ms.hidden, n_out, out)
        else:
            model = build_attention_model(Rng(0), N_FEATURES, min(ms.hidden, 32), n_out,
                                          seq_len=task.columns_per_example, output=out)
        model.load_state_dict(default_pretrained(
            ms.pretrain_seed, epochs=ms.pretrain_epochs, n_examples=ms.pretrain_examples,
            model_kind=cfg.model_kind, hidden=ms.hidden, n_classes=t.n_classes,
        ))
    if cfg.adapter_mode is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            attach_adapters(model, rng.split("adapters"), cfg.adapter_mode, cfg.adapter.r_init,
                            cfg.adapter.scaling, gate_init=cfg.adapter.gate_init)
    return task, model


def _ranks(model, eps):
    return {name: effective_rank(a, eps) for name, a in sorted(model.adapters().items())}


def run_experiment(cfg, seed, on_step=None):
    """Train on the support set, then score the query set once.

    ``on_step(model, epoch, eta)``, if given, is called after every
    optimisation step.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    cfg.validate()
    task, model = build_run(cfg, seed)
    trainable = trainable_parameters(model, cfg.strategy, cfg.task.mode)
    n_params = count_trainable(model, cfg.strategy, cfg.task.mode)
    loss_fn = LOSSES[task.loss_kind]
    opt = OptimizerState(cfg.prox.adamw)
    es = EarlyStopState(cfg.train.window, cfg.train.threshold)
    history = []
    stop_reason = "max_epochs"
    abort_layer = None
    for epoch in range(cfg.prox.total_epochs):
        eta = cosine_lr(epoch, cfg.prox)
        opt.epoch, opt.eta = epoch, eta
        losses = []
        try:
            for bx, by in task.support_batches(cfg.train.batch_size):
                losses.append(train_step(model, bx, by, loss_fn, opt, cfg.prox, trainable, eta))
                if on_step is not None:
                    on_step(model, epoch, eta)
        except TrainingAborted as exc:
            stop_reason, abort_layer = "abort", exc.layer
            break
        epoch_loss = float(np.mean(losses))
        history.append(EpochRecord(
            epoch=epoch,
            loss=epoch_loss,
            objective=epoch_loss + regularizer(model, trainable, cfg.prox.lam),
            eta=eta,
            ranks=_ranks(model, cfg.eval.eps_rank),
        ))
        if cfg.train.early_stop and should_stop(es, epoch_loss):
            stop_reason = "early_stop"
            break

    qx, qy = task.query()
    if stop_reason == "abort":
        metric = None
    elif task.loss_kind == "mse":
        pred, _ = model.forward(qx)
        metric = float(mse_loss(pred, qy)[0])
    else:
        metric = evaluate_segmentation(model, qx, qy, cfg.eval.dice_threshold, task.columns_per_example)
    return RunResult(
        config=cfg.to_dict(),
        seed=seed,
        strategy=cfg.strategy,
        task=task_label(cfg),
        K=cfg.task.K,
        r_init=cfg.adapter.r_init if cfg.adapter_mode else None,
        metric_name="mse" if task.loss_kind == "mse" else "dice",
        final_metric=metric,
        final_ranks=_ranks(model, cfg.eval.eps_rank),
        params=n_params,
        epochs_ran=len(history),
        stop_reason=stop_reason,
        history=history,
        query_reads=task.query_reads,
        abort_layer=abort_layer,
    )


def _run_dict(args):
    cfg_dict, seed = args
    return run_experiment(ExperimentConfig.from_dict(cfg_dict), seed).to_dict()


def run_many(jobs_list, n_jobs=1):
    """Run ``[(cfg, seed), ...]``; results come back in input order."""
    if n_jobs <= 1 or len(jobs_list) <= 1:
        return [run_experiment(cfg, seed) for cfg, seed in jobs_list]
    payload = [(cfg.to_dict(), seed) for cfg, seed in jobs_list]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return [RunResult.from_dict(d) for d in pool.map(_run_dict, payload)]


def with_overrides(cfg, **changes):
    """Copy of ``cfg`` with dotted-path fields replaced, e.g. ``{"prox.lam": 0.1}``."""
    d = cfg.to_dict()
    for key, value in changes.items():
        node = d
        parts = key.replace("__", ".").split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


@dataclass
class SweepTable:
    rows: list
    across_rank_std: dict
    across_rank_var: dict


def rank_init_sweep(cfg, ranks, seeds=None, strategies=("lora", "arena"), n_jobs=1):
    """Run every (rank, strategy, seed) and summarise how much the final metric
    moves with the initial rank.

    ``across_rank_std[strategy][seed]`` is the population std of the final
    metric over ``ranks`` for that seed; ``across_rank_var[strategy]`` is
    the variance over ranks of the seed-mean metric.
    """
    if not ranks:
        raise ConfigError("rank_init_sweep needs at least one rank")
    seeds = list(cfg.seeds if seeds is None else seeds)
    jobs = [(with_overrides(cfg, **{"strategy": s, "adapter.r_init": r}), seed)
            for r in ranks for s in strategies for seed in seeds]
    results = run_many(jobs, n_jobs)
    rows = [dict(r.csv_row(), init_rank=r.r_init) for r in results]
    std, var = {}, {}
    for s in strategies:
        std[s] = {}
        for seed in seeds:
            vals = [r.final_metric for r in results if r.strategy == s and r.seed == seed]
            std[s][seed] = float(np.std(vals))
        means = [np.mean([r.final_metric for r in results if r.strategy == s and r.r_init == rk])
                 for rk in ranks]
        var[s] = float(np.var(means))
    return SweepTable(rows, std, var)


@dataclass
class Summary:
    cells: dict
    missing: list


def aggregate(rows, keys=("task", "strategy", "K", "r_init"), value="final_metric", expected=None):
    """Mean and population std of ``value`` per cell of ``keys``.

    Rows whose value is missing are left out (never imputed); cells in
    ``expected`` with no usable row are listed in ``missing``.
    """
    rows = [r.csv_row() if isinstance(r, RunResult) else r for r in rows]
    if not rows:
        warnings.warn("aggregate called with no results", stacklevel=2)
        return Summary({}, list(expected or []))
    groups = {}
    for row in rows:
        cell = tuple(row.get(k) for k in keys)
        groups.setdefault(cell, [])
        v = row.get(value)
        if v is not None and v == v:
            groups[cell].append(float(v))
    cells = {}
    for cell, vals in groups.items():
        if vals:
            cells[cell] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    missing = [c for c in (expected or groups) if c not in cells]
    return Summary(cells, missing)


def summary_rows(summary, keys=("task", "strategy", "K", "r_init")):
    return [dict(zip(keys, cell), **stats) for cell, stats in sorted(summary.cells.items(), key=lambda kv: str(kv[0]))]


# ---------------------------------------------------------------- files


def atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path, results):
    atomic_write(path, "".join(r.to_json() + "\n" for r in results))


def read_jsonl(path):
    """Parse a JSON-lines file; returns ``(results, n_bad_lines)``."""
    results, bad = [], 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                results.append(RunResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError):
                bad += 1
    return results, bad


def write_csv(path, rows, columns=CSV_COLUMNS, header_comment=None):
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write(path, buf.getvalue())
