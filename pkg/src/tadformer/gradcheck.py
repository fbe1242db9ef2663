"""Finite-difference oracles for the hand-written backward passes.

Analytic gradients come from the normal float32 path. The reference is a
central difference evaluated on a float64 shadow of the same computation, so
the oracle's own rounding error stays far below the tolerance.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward

FD_STEP = 1e-3
TOLERANCE = 1e-4


def relative_error(analytic, numeric) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``.

    Returns 0 when both gradients vanish identically.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def central_difference(f, x: np.ndarray, h: float = FD_STEP, with_branch: bool = False) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at float64 array ``x``.

    ``x`` is perturbed in place and restored. With ``with_branch`` the
    function returns ``(value, branch)`` where ``branch`` summarises the
    active piece of a piecewise-smooth function (e.g. residual signs of an L1
    loss); a probe that lands on a different piece is retried with a smaller
    step.
    """
    grad = np.empty(x.shape, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    if with_branch:
        _, base = f(x)
    for i in range(flat.size):
        orig = flat[i]
        step = h
        for _ in range(6):
            flat[i] = orig + step
            fp = f(x)
            flat[i] = orig - step
            fm = f(x)
            flat[i] = orig
            if not with_branch:
                break
            (fp, bp), (fm, bm) = fp, fm
            if bp == base and bm == base:
                break
            step /= 8.0
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_function(fn, inputs, seed=0, h=FD_STEP):
    """Compare backward against float64 central differences for ``fn``.

    ``fn`` maps a list of tensors to one tensor. The output is reduced to a
    scalar by a fixed random projection so every output entry is exercised.
    Returns the list of per-input relative errors.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(ts)
    proj = rng.standard_normal(out.shape)
    loss = (out * Tensor(proj)).sum()
    backward(loss)

    errors = []
    for i, x in enumerate(inputs):

        def f(xi, i=i):
            args = [Tensor(v, dtype=np.float64) for v in inputs]
            args[i] = Tensor(xi, dtype=np.float64)
            return float((fn(args).data.astype(np.float64) * proj).sum())

        num = central_difference(f, x.copy(), h)
        errors.append(relative_error(ts[i].grad, num))
    return errors


# ---------------------------------------------------------------------------
# whole-model audit

MAX_AUDIT_PARAMS = 20_000


def _jitter(model, seed):
    """Move zero-initialised tensors off zero so every path carries gradient.

    With all up-projections at zero the down-projections receive exactly
    zero gradient, which would make the audit vacuous for them.
    """
    rng = np.random.default_rng([seed, 99])
    for name, t in model.params.items():
        if name.endswith("/up"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
        elif name.endswith("/gate"):
            t.data[...] = 0.5 * rng.standard_normal(t.shape)


def audit_model(run_cfg, seed=None, h=FD_STEP, progress=None):
    """Finite-difference audit of every trainable tensor of ``run_cfg.mode``.

    Returns ``{group: max relative error}``. The analytic side is the
    float32 training path; the reference is a float64 shadow model.
    """
    from .data import synth_generate
    from .errors import UsageError
    from .model import TADFormer
    from .mtl import multitask_loss, task_loss
    from .peft import param_group
    from .config import TaskKind

    seed = run_cfg.seed if seed is None else seed
    cfg = run_cfg.model
    model = TADFormer(cfg, run_cfg.mode, seed=seed)
    n_train = model.num_params(trainable_only=True)
    if n_train > MAX_AUDIT_PARAMS:
        raise UsageError(
            f"gradient audit needs toy dimensions: {n_train} trainable parameters exceeds the cap of {MAX_AUDIT_PARAMS}"
        )
    _jitter(model, seed)
    bb = cfg.backbone
    data = synth_generate(seed, cfg.tasks, grid=bb.grid, count=run_cfg.batch_size, patch_size=bb.patch_size, in_chans=bb.in_chans)
    images, targets = data.batch(np.arange(len(data)))
    weights = [t.weight for t in cfg.tasks]

    def loss_of(m, resume=None):
        out = m(images, resume=resume)
        losses = [task_loss(t.kind, p, y) for t, p, y in zip(cfg.tasks, out.predictions, targets)]
        branch = tuple(
            np.signbit(p.data[..., 0] - y).tobytes() for t, p, y in zip(cfg.tasks, out.predictions, targets) if t.kind is TaskKind.REGRESSION
        )
        return multitask_loss(losses, weights), branch

    loss, _ = loss_of(model)
    backward(loss)

    shadow = model.astype(np.float64)
    for t in shadow.params.values():
        t.requires_grad = False
    # a probe on a stage-s tensor cannot change anything computed before stage s
    states = []
    shadow.encode(images, record=states)

    analytic, numeric = {}, {}
    for name in model.trainable:
        grad = model.params[name].grad
        if grad is None:
            grad = np.zeros(model.params[name].shape)
        resume = states[first_stage(name, bb.num_stages)] if name.startswith(("peft/stage", "backbone/stage", "heads/")) else None

        def f(_x, resume=resume):
            value, branch = loss_of(shadow, resume)
            return float(value.data), branch

        num = central_difference(f, shadow.params[name].data, h, with_branch=True)
        g = param_group(name)
        analytic.setdefault(g, []).append(grad.ravel())
        numeric.setdefault(g, []).append(num.ravel())
        if progress is not None:
            progress(name)
    return {g: relative_error(np.concatenate(analytic[g]), np.concatenate(numeric[g])) for g in analytic}


def first_stage(name: str, num_stages: int) -> int:
    """Earliest stage whose computation reads tensor ``name``.

    Heads map to ``num_stages`` (decoder only); embedding and prompt tensors
    map to 0.
    """
    parts = name.split("/")
    if parts[0] == "heads":
        return num_stages
    for p in parts[:2]:
        if p.startswith("stage"):
            return int(p[5:])
    return 0
