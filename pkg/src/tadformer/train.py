"""Adam optimiser, training step, evaluation and the training driver."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import save_model
from .data import synth_generate
from .errors import NumericalError
from .model import TADFormer
from .mtl import multitask_loss, task_loss, task_metric
from .peft import configure_trainable_set
from .tensor import backward

logger = logging.getLogger(__name__)

CSV_HEADER = ("step", "task", "loss", "metric", "weighted_loss", "seed")


class Adam:
    """Adam with bias correction; optional L2 decay is folded into the gradient."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


@dataclass
class MetricsRecord:
    step: int
    losses: list
    weighted_loss: float
    metrics: list
    seed: int
    wall_clock: float = 0.0


def compute_loss(model: TADFormer, images, targets):
    out = model(images)
    losses = [task_loss(t.kind, p, y) for t, p, y in zip(model.cfg.tasks, out.predictions, targets)]
    total = multitask_loss(losses, [t.weight for t in model.cfg.tasks])
    return total, losses, out


def train_step(model: TADFormer, batch, optimizer: Adam, mode=None, step=0, seed=0) -> MetricsRecord:
    if mode is not None and config_mod.TuningMode.parse(mode) is not model.mode:
        raise config_mod.ConfigError(f"model was built for {model.mode.value}, not {mode}", key="mode")
    images, targets = batch
    t0 = time.perf_counter()
    optimizer.zero_grad()
    total, losses, out = compute_loss(model, images, targets)
    value = float(total.data)
    if not np.isfinite(value):
        per_task = ", ".join(f"{t.name}={float(l.data):.4g}" for t, l in zip(model.cfg.tasks, losses))
        raise NumericalError(f"non-finite loss at step {step}: {per_task}")
    if total.requires_grad:
        backward(total)
        optimizer.step()
    metrics = [task_metric(t, p.data, y) for t, p, y in zip(model.cfg.tasks, out.predictions, targets)]
    return MetricsRecord(step, [float(l.data) for l in losses], value, metrics, seed, time.perf_counter() - t0)


def evaluate(model: TADFormer, dataset, batch_size=8):
    """Dataset-level per-task losses, weighted loss and metrics."""
    n = len(dataset)
    tasks = model.cfg.tasks
    loss_sums = np.zeros(len(tasks))
    preds = [[] for _ in tasks]
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        images, targets = dataset.batch(idx)
        _, losses, out = compute_loss(model, images, targets)
        loss_sums += np.array([float(l.data) for l in losses]) * len(idx)
        for i, p in enumerate(out.predictions):
            preds[i].append(p.data)
    losses = loss_sums / n
    metrics = [task_metric(t, np.concatenate(p), y) for t, p, y in zip(tasks, preds, dataset.targets)]
    weighted = float(sum(t.weight * l for t, l in zip(tasks, losses)))
    return {"losses": losses.tolist(), "weighted_loss": weighted, "metrics": metrics}


def format_float(x) -> str:
    return format(float(x), ".9g")


def write_metrics_csv(path, records, tasks):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in records:
            for task, loss, metric in zip(tasks, rec.losses, rec.metrics):
                w.writerow([rec.step, task.name, format_float(loss), format_float(metric), format_float(rec.weighted_loss), rec.seed])


@dataclass
class TrainResult:
    model: TADFormer
    records: list
    initial_eval: dict
    final_eval: dict
    paths: dict = field(default_factory=dict)


def make_datasets(cfg, workers=1):
    m = cfg.model
    bb = m.backbone
    kw = dict(grid=bb.grid, patch_size=bb.patch_size, in_chans=bb.in_chans, workers=workers)
    train = synth_generate(cfg.seed, m.tasks, count=cfg.train_size, **kw)
    evals = synth_generate(cfg.seed + 1_000_003, m.tasks, count=cfg.eval_size, **kw)
    return train, evals


def run_training(cfg, out_dir=None, workers=1, evaluate_before=True) -> TrainResult:
    """Train ``cfg.mode`` from scratch; writes CSV, checkpoint and config when ``out_dir`` is set."""
    model = TADFormer(cfg.model, cfg.mode, seed=cfg.seed)
    configure_trainable_set(cfg.mode, model)
    train, evals = make_datasets(cfg, workers)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    initial = evaluate(model, evals) if evaluate_before else None

    records, order, pos = [], np.empty(0, dtype=int), 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(train)), 0
            if len(order) < cfg.batch_size:
                order = np.resize(order, cfg.batch_size)
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        rec = train_step(model, train.batch(idx), opt, step=step, seed=cfg.seed)
        if step % cfg.log_every == 0:
            records.append(rec)
            logger.debug("step %d weighted loss %.5f", step, rec.weighted_loss)

    final = evaluate(model, evals)
    paths = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths["metrics"] = out / "metrics.csv"
        paths["checkpoint"] = out / "final.tadf"
        paths["config"] = out / "config.json"
        write_metrics_csv(paths["metrics"], records, cfg.model.tasks)
        save_model(paths["checkpoint"], model)
        paths["config"].write_text(config_mod.dumps(cfg), encoding="utf-8")
    return TrainResult(model, records, initial, final, paths)
