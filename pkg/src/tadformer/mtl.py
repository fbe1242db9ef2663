"""Multi-task objective, evaluation metrics and parameter accounting."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .config import TaskKind
from .errors import ConfigError, DataError
from .peft import GROUPS, param_group, trainable_groups


def task_loss(kind, pred, target):
    """Per-task loss on head output ``pred`` of shape (B, N, out_channels)."""
    kind = TaskKind(kind)
    if kind is TaskKind.CLASS_SEG:
        return F.cross_entropy(pred, target)
    if kind is TaskKind.REGRESSION:
        return F.l1_loss(pred[..., 0], target)
    return F.balanced_bce(pred[..., 0], target)


def multitask_loss(losses, weights):
    """Weighted sum of task losses."""
    if len(losses) != len(weights):
        raise ConfigError(f"{len(losses)} losses but {len(weights)} weights", key="tasks.weight")
    total = None
    for loss, w in zip(losses, weights):
        term = loss * float(w)
        total = term if total is None else total + term
    return total


def compute_delta_m(multi, single, lower_is_better) -> float:
    """Mean signed relative change over the single-task baseline, in percent."""
    if not (len(multi) == len(single) == len(lower_is_better)):
        raise ConfigError("delta_m inputs must have equal lengths")
    if not multi:
        raise ConfigError("delta_m needs at least one task")
    total = 0.0
    for m, s, lo in zip(multi, single, lower_is_better):
        if s == 0:
            raise ZeroDivisionError("single-task baseline metric is zero")
        total += (-1) ** int(lo) * (m - s) / s
    return 100.0 * total / len(multi)


# ---------------------------------------------------------------------------
# metrics


def mean_iou(pred_labels, true_labels, num_classes) -> float:
    """Mean IoU over the classes present in prediction or ground truth."""
    p = np.asarray(pred_labels).ravel()
    t = np.asarray(true_labels).ravel()
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes})")
    ious = []
    for c in range(num_classes):
        inter = np.sum((p == c) & (t == c))
        union = np.sum((p == c) | (t == c))
        if union:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else 1.0


def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return math.sqrt(float(np.mean(d * d)))


def task_metric(task, pred, target) -> float:
    """mIoU for segmentation-style tasks, RMSE for regression."""
    pred = np.asarray(pred)
    if task.kind is TaskKind.CLASS_SEG:
        return mean_iou(pred.argmax(axis=-1), target, task.classes)
    if task.kind is TaskKind.REGRESSION:
        return rmse(pred[..., 0], target)
    return mean_iou((pred[..., 0] > 0).astype(int), target, 2)


# ---------------------------------------------------------------------------
# parameter budget


def count_params(model, mode=None) -> "OrderedDict[str, int]":
    """Per-group trainable counts for ``mode`` (defaults to the model's mode).

    The result includes every group (zero when absent) and a ``total`` entry.
    """
    groups = trainable_groups(mode if mode is not None else model.mode)
    out = OrderedDict((g, 0) for g in GROUPS)
    for name, t in model.params.items():
        g = param_group(name)
        if g in groups:
            out[g] += t.size
    out["total"] = sum(out[g] for g in GROUPS)
    return out


def closed_form_params(cfg, mode) -> "OrderedDict[str, int]":
    """Trainable counts derived from the configuration alone.

    Independent of the model builder; used to cross-check enumeration.
    """
    from .peft import routing

    route = routing(mode)
    groups = trainable_groups(mode)
    bb = cfg.backbone
    r, k, Tn = cfg.rank, cfg.kernel, cfg.num_tasks
    dims, S = bb.stage_dims, bb.num_stages
    rho = bb.mlp_ratio
    out = OrderedDict((g, 0) for g in GROUPS)
    for s, (C, d, H) in enumerate(zip(dims, bb.depths, bb.heads)):
        hid = int(C * rho)
        h, w = bb.stage_grid(s)
        per_block_frozen = C * 3 * C + 3 * C + C * C + C + C * hid + hid + hid * C + C
        out["backbone"] += d * per_block_frozen + (8 * C * C if s < S - 1 else 0)
        out["norms"] += d * 4 * C
        out["pos-bias"] += d * H * (2 * h - 1) * (2 * w - 1)
        if route.ts_lora:
            out["ts-lora"] += d * r * ((C + 3 * C) + (C + C) + (C + hid) + (hid + C))
        if route.task_path:
            out["ta-lora"] += r * ((C + C) + (C + hid) + (hid + C))
            if route.dtf:
                out["dtf"] += 3 * (r * r * k * k + r)
        if route.gate:
            out["gates"] += 1
        if route.prompts and Tn and s < S - 1:
            out["upsamplers"] += 2 * C * C
    if route.prompts:
        out["prompts"] = Tn * dims[0]
    pin = bb.in_chans * bb.patch_size**2
    out["backbone"] += pin * dims[0] + dims[0]
    out["heads"] = sum((sum(dims) + 1) * t.out_channels for t in cfg.tasks)
    for g in GROUPS:
        if g not in groups:
            out[g] = 0
    out["total"] = sum(out[g] for g in GROUPS)
    return out
