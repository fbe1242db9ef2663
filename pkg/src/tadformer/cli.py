"""``tadformer`` command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical failure
(including a failed gradient audit), 3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import load_model
from .config import TuningMode
from .errors import CheckpointError, ConfigError, NumericalError, UsageError
from .gradcheck import TOLERANCE, audit_model
from .model import TADFormer
from .mtl import count_params
from .peft import GROUPS
from .tensor import corrupt_backward
from .train import evaluate, format_float, make_datasets, run_training

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("tadformer")


def worker_count(requested: int) -> int:
    """Requested data workers, capped by ``TADFORMER_THREADS`` when set."""
    n = max(1, requested)
    cap = os.environ.get("TADFORMER_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"TADFORMER_THREADS must be an integer, got {cap!r}", key="TADFORMER_THREADS") from None
    return n


def _load_config(args):
    cfg = config_mod.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _model_for(cfg, checkpoint):
    if checkpoint is None:
        return TADFormer(cfg.model, cfg.mode, seed=cfg.seed)
    return load_model(checkpoint, cfg.model, cfg.mode)


def _print_eval(tasks, result, prefix):
    print(f"{prefix} weighted_loss {format_float(result['weighted_loss'])}")
    for t, loss, metric in zip(tasks, result["losses"], result["metrics"]):
        name = "rmse" if t.lower_is_better else "miou"
        print(f"  {t.name:<12} loss {format_float(loss):<14} {name} {format_float(metric)}")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = run_training(cfg, out_dir=cfg.out, workers=worker_count(args.workers))
    _print_eval(cfg.model.tasks, result.final_eval, "final")
    print(f"metrics: {result.paths['metrics']}")
    print(f"checkpoint: {result.paths['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = _model_for(cfg, args.checkpoint)
    _, evals = make_datasets(cfg, worker_count(args.workers))
    _print_eval(cfg.model.tasks, evaluate(model, evals), "eval")
    return EXIT_OK


def param_table(model_cfg) -> list:
    """Rows ``(mode, {group: count, "total": n})`` for every tuning mode."""
    rows = []
    for mode in TuningMode:
        model = TADFormer(model_cfg, mode)
        rows.append((mode.value, count_params(model, mode)))
    return rows


def cmd_count_params(args) -> int:
    cfg = _load_config(args)
    rows = param_table(cfg.model)
    cols = list(GROUPS) + ["total"]
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["mode"] + cols)
        for mode, counts in rows:
            w.writerow([mode] + [counts[c] for c in cols])
        return EXIT_OK
    cells = [["mode"] + cols] + [[mode] + [str(counts[c]) for c in cols] for mode, counts in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols) + 1)]
    for r in cells:
        first = r[0].ljust(widths[0])
        rest = "  ".join(v.rjust(wd) for v, wd in zip(r[1:], widths[1:]))
        print(f"{first}  {rest}")
    return EXIT_OK


def tam_images(tam: np.ndarray, grid) -> np.ndarray:
    """8-bit images from one sample's TAM of shape ``(H, T, N)``.

    Heads are averaged, each task's map is reshaped to ``grid`` and min-max
    scaled to 0..255; a constant map becomes uniform 128.
    """
    avg = tam.astype(np.float64).mean(axis=0)
    out = np.empty((avg.shape[0],) + tuple(grid), dtype=np.uint8)
    for i, row in enumerate(avg):
        lo, hi = row.min(), row.max()
        if hi == lo:
            out[i] = 128
        else:
            out[i] = np.floor((row - lo) / (hi - lo) * 255.0 + 0.5).reshape(grid)
    return out


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def cmd_export_tam(args) -> int:
    cfg = _load_config(args)
    model = _model_for(cfg, args.checkpoint)
    if model.n_prompts == 0:
        raise UsageError(f"mode {cfg.mode.value} has no task prompts, so there is no task attention map")
    _, evals = make_datasets(cfg, worker_count(args.workers))
    if not 0 <= args.sample < len(evals):
        raise UsageError(f"sample index {args.sample} outside the evaluation set of {len(evals)}")
    images, _ = evals.batch(np.array([args.sample]))
    out = model(images)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s, tam in enumerate(out.task_attention):
        grid = model.stages[s].grid
        for i, img in enumerate(tam_images(tam.data[0], grid)):
            path = out_dir / f"tam_stage{s}_task{i}.pgm"
            write_pgm(path, img)
            print(path)
    return EXIT_OK


def _parse_corruption(text):
    parts = text.split(":")
    op = parts[0]
    index = int(parts[1]) if len(parts) > 1 else 0
    scale = float(parts[2]) if len(parts) > 2 else 1.5
    return op, index, scale


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    if args.corrupt_op:
        with corrupt_backward(*_parse_corruption(args.corrupt_op)):
            errors = audit_model(cfg)
    else:
        errors = audit_model(cfg)
    failed = []
    for group in GROUPS:
        if group not in errors:
            continue
        ok = errors[group] <= TOLERANCE
        if not ok:
            failed.append(group)
        print(f"{group:<11} max_rel_err {errors[group]:.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradient audit failed for: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"gradient audit passed (tolerance {TOLERANCE:g})")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "export-tam": cmd_export_tam,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadformer", description="Multi-task parameter-efficient fine-tuning toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="output directory (overrides the configured one)")
        p.add_argument("--csv", action="store_true", help="machine-readable output where supported")
        p.add_argument("--workers", type=int, default=1, help="data-generation workers")
        if name in ("eval", "export-tam"):
            p.add_argument("--checkpoint", default=None, help="model checkpoint (fresh init when omitted)")
        if name == "export-tam":
            p.add_argument("--sample", type=int, default=0, help="evaluation sample index")
        if name == "grad-check":
            p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
