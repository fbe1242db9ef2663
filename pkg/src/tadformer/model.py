"""Full multi-task encoder: frozen backbone, adaptation modules and task heads.

All tensors live in one ordered ``params`` dict keyed by slash-separated
names; the structured views (blocks, LoRA modules, ...) reference the same
Tensor objects, so optimisers and checkpoints only deal with the dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import BlockWeights, LayerNormWeights, Linear, block_forward, patch_embed, patch_merge
from .config import ModelConfig, TuningMode
from .errors import DimensionError
from .peft import (
    DtfGenerator,
    TaModule,
    TsModule,
    configure_trainable_set,
    extract_task_attention_map,
    gated_output,
    prepend_task_prompts,
    prompt_upsample,
    routing,
    ta_forward,
    tpc_adapt,
)
from .tensor import Tensor

_LINEARS = ("qkv", "proj", "fc1", "fc2")
_TA_LINEARS = ("proj", "fc1", "fc2")


def init_params(cfg: ModelConfig, mode, seed: int = 0, dtype=np.float32) -> dict:
    """Seeded initial tensors for ``mode``.

    Backbone weights stand in for pretrained ones and depend only on
    ``cfg.backbone_seed``; adaptation modules and heads depend on ``seed``.
    """
    route = routing(mode)
    bb = cfg.backbone
    brng = np.random.default_rng(cfg.backbone_seed)
    prng = np.random.default_rng(seed)
    p = {}

    def uniform(rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    dims = bb.stage_dims
    C0 = dims[0]
    pin = bb.in_chans * bb.patch_size**2
    p["backbone/patch_embed/weight"] = uniform(brng, (pin, C0), pin)
    p["backbone/patch_embed/bias"] = uniform(brng, (C0,), pin)
    for s, (C, depth, H) in enumerate(zip(dims, bb.depths, bb.heads)):
        h, w = bb.stage_grid(s)
        hid = bb.hidden_dim(s)
        for b in range(depth):
            pre = f"backbone/stage{s}/block{b}"
            p[f"{pre}/norm1/gamma"] = np.ones(C)
            p[f"{pre}/norm1/beta"] = np.zeros(C)
            p[f"{pre}/attn/qkv/weight"] = uniform(brng, (C, 3 * C), C)
            p[f"{pre}/attn/qkv/bias"] = uniform(brng, (3 * C,), C)
            p[f"{pre}/attn/pos_bias"] = 0.02 * brng.standard_normal((H, (2 * h - 1) * (2 * w - 1)))
            p[f"{pre}/attn/proj/weight"] = uniform(brng, (C, C), C)
            p[f"{pre}/attn/proj/bias"] = uniform(brng, (C,), C)
            p[f"{pre}/norm2/gamma"] = np.ones(C)
            p[f"{pre}/norm2/beta"] = np.zeros(C)
            p[f"{pre}/mlp/fc1/weight"] = uniform(brng, (C, hid), C)
            p[f"{pre}/mlp/fc1/bias"] = uniform(brng, (hid,), C)
            p[f"{pre}/mlp/fc2/weight"] = uniform(brng, (hid, C), hid)
            p[f"{pre}/mlp/fc2/bias"] = uniform(brng, (C,), hid)
        if s < bb.num_stages - 1:
            p[f"backbone/merge{s}/weight"] = uniform(brng, (4 * C, 2 * C), 4 * C)

    r, k, Tn = cfg.rank, cfg.kernel, cfg.num_tasks
    if route.prompts and Tn:
        p["peft/prompts"] = 0.5 * prng.standard_normal((Tn, C0))
    for s, (C, depth) in enumerate(zip(dims, bb.depths)):
        hid = bb.hidden_dim(s)
        shapes = {"qkv": (C, 3 * C), "proj": (C, C), "fc1": (C, hid), "fc2": (hid, C)}
        if route.ts_lora:
            for b in range(depth):
                for name in _LINEARS:
                    fin, fout = shapes[name]
                    p[f"peft/stage{s}/block{b}/{name}/down"] = uniform(prng, (fin, r), fin)
                    p[f"peft/stage{s}/block{b}/{name}/up"] = np.zeros((r, fout))
        if route.task_path:
            for name in _TA_LINEARS:
                fin, fout = shapes[name]
                p[f"peft/stage{s}/ta/{name}/down"] = uniform(prng, (fin, r), fin)
                p[f"peft/stage{s}/ta/{name}/up"] = np.zeros((r, fout))
                if route.dtf:
                    p[f"peft/stage{s}/ta/{name}/generator"] = uniform(prng, (r, r * k * k), r)
                    p[f"peft/stage{s}/ta/{name}/scale"] = np.ones(r)
        if route.gate:
            p[f"peft/stage{s}/gate"] = np.zeros(1)
        if route.prompts and Tn and s < bb.num_stages - 1:
            p[f"peft/upsample{s}/weight"] = uniform(prng, (C, 2 * C), C)

    feat = sum(dims)
    for task in cfg.tasks:
        p[f"heads/{task.name}/weight"] = uniform(prng, (feat, task.out_channels), feat)
        p[f"heads/{task.name}/bias"] = np.zeros(task.out_channels)

    return {name: Tensor(v, dtype=dtype) for name, v in p.items()}


@dataclass
class ForwardResult:
    predictions: list  # per task, (B, N0, out_channels)
    stage_features: list  # [stage][task] -> (B, N_s, C_s)
    task_attention: list  # per stage, (B, H, T, N_s) or None
    shared: list = field(default_factory=list)  # per stage, full token sequence


@dataclass
class StageViews:
    blocks: list
    ts: list  # per block: dict linear -> TsModule, or None
    ta: dict  # linear -> TaModule (empty without a task path)
    gate: Tensor | None
    upsample: Tensor | None
    merge: Tensor | None
    grid: tuple


class TADFormer:
    def __init__(self, cfg: ModelConfig, mode=TuningMode.TADFORMER, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.mode = TuningMode.parse(mode)
        self.route = routing(self.mode)
        self.params = params if params is not None else init_params(cfg, self.mode, seed)
        expected = init_params(cfg, self.mode, 0).keys() if params is not None else None
        if expected is not None and list(expected) != list(self.params.keys()):
            missing = [n for n in expected if n not in self.params]
            extra = [n for n in self.params if n not in expected]
            raise DimensionError(f"parameter set does not match mode {self.mode.value}: missing {missing[:3]}, unexpected {extra[:3]}")
        self.trainable = configure_trainable_set(self.mode, self) if params is None else sorted(
            n for n, t in self.params.items() if t.requires_grad
        )
        self._build_views()

    # ------------------------------------------------------------------
    def _build_views(self):
        p, bb, cfg = self.params, self.cfg.backbone, self.cfg
        eps = bb.ln_eps
        self.stages = []
        for s, depth in enumerate(bb.depths):
            grid = bb.stage_grid(s)
            blocks, ts = [], []
            for b in range(depth):
                pre = f"backbone/stage{s}/block{b}"
                lin = {
                    "qkv": Linear(p[f"{pre}/attn/qkv/weight"], p[f"{pre}/attn/qkv/bias"]),
                    "proj": Linear(p[f"{pre}/attn/proj/weight"], p[f"{pre}/attn/proj/bias"]),
                    "fc1": Linear(p[f"{pre}/mlp/fc1/weight"], p[f"{pre}/mlp/fc1/bias"]),
                    "fc2": Linear(p[f"{pre}/mlp/fc2/weight"], p[f"{pre}/mlp/fc2/bias"]),
                }
                blocks.append(
                    BlockWeights(
                        norm1=LayerNormWeights(p[f"{pre}/norm1/gamma"], p[f"{pre}/norm1/beta"], eps),
                        qkv=lin["qkv"],
                        pos_bias=p[f"{pre}/attn/pos_bias"],
                        proj=lin["proj"],
                        norm2=LayerNormWeights(p[f"{pre}/norm2/gamma"], p[f"{pre}/norm2/beta"], eps),
                        fc1=lin["fc1"],
                        fc2=lin["fc2"],
                        heads=bb.heads[s],
                        grid=grid,
                    )
                )
                if self.route.ts_lora:
                    lp = f"peft/stage{s}/block{b}"
                    ts.append({n: TsModule(lin[n], p[f"{lp}/{n}/down"], p[f"{lp}/{n}/up"]) for n in _LINEARS})
                else:
                    ts.append(None)
            ta = {}
            if self.route.task_path:
                last = blocks[-1]
                for n in _TA_LINEARS:
                    tp = f"peft/stage{s}/ta/{n}"
                    gen = None
                    if self.route.dtf:
                        gen = DtfGenerator(p[f"{tp}/generator"], p[f"{tp}/scale"], cfg.kernel, cfg.filter_norm_eps)
                    ta[n] = TaModule(getattr(last, n), p[f"{tp}/down"], p[f"{tp}/up"], gen)
            self.stages.append(
                StageViews(
                    blocks=blocks,
                    ts=ts,
                    ta=ta,
                    gate=p.get(f"peft/stage{s}/gate"),
                    upsample=p.get(f"peft/upsample{s}/weight"),
                    merge=p.get(f"backbone/merge{s}/weight"),
                    grid=grid,
                )
            )
        self.prompts = p.get("peft/prompts")
        self.heads = [Linear(p[f"heads/{t.name}/weight"], p[f"heads/{t.name}/bias"]) for t in cfg.tasks]

    def astype(self, dtype) -> "TADFormer":
        """Copy of the model with every tensor cast (used for float64 shadows)."""
        params = {n: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for n, t in self.params.items()}
        return TADFormer(self.cfg, self.mode, params=params)

    @property
    def n_prompts(self):
        return self.prompts.shape[0] if self.prompts is not None else 0

    # ------------------------------------------------------------------
    def embed(self, images) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(images, dtype=self.params["backbone/patch_embed/weight"].dtype)
        x = patch_embed(images, self.params["backbone/patch_embed/weight"], self.params["backbone/patch_embed/bias"], self.cfg.backbone.patch_size)
        if self.prompts is not None:
            x = prepend_task_prompts(x, self.prompts)
        return x

    def task_path(self, s: int, x: Tensor, f_full: Tensor, A: Tensor):
        """Per-task outputs of the task-adapting block of stage ``s``."""
        st, n = self.stages[s], self.n_prompts
        Tn = self.cfg.num_tasks
        f_qkv = f_full[:, n:, :] if n else f_full
        x_patch = x[:, n:, :] if n else x
        tam = extract_task_attention_map(A, n) if n else None
        if self.route.tpc and tam is not None:
            feats = tpc_adapt(f_qkv, tam)
        else:
            feats = [f_qkv]
        norm2 = st.blocks[-1].norm2
        outs = []
        for f in feats:
            y = x_patch + ta_forward(st.ta["proj"], f, st.grid)
            hid = F.gelu(ta_forward(st.ta["fc1"], norm2(y), st.grid))
            f_hat = y + ta_forward(st.ta["fc2"], hid, st.grid)
            outs.append(gated_output(f, f_hat, st.gate) if self.route.gate else f_hat)
        if len(outs) == 1:
            outs = outs * Tn
        return outs, feats, tam

    def stage_forward(self, s: int, x: Tensor, adapters: bool = True):
        """Run one stage; returns ``(shared_out, per_task_out, tam)``.

        ``shared_out`` (prompts + patches) continues to the next stage through
        frozen hosts plus the task-shared LoRA paths only.
        """
        st, n = self.stages[s], self.n_prompts
        for b, bw in enumerate(st.blocks):
            hooks = st.ts[b] if adapters and st.ts[b] is not None else {}
            x_in = x
            x, f_full, A = block_forward(x, bw, n, **hooks)
        tam = extract_task_attention_map(A, n) if n else None
        if adapters and self.route.task_path:
            per_task, _, _ = self.task_path(s, x_in, f_full, A)
        else:
            patches = x[:, n:, :] if n else x
            per_task = [patches] * self.cfg.num_tasks
        return x, per_task, tam

    def transition(self, s: int, x: Tensor) -> Tensor:
        st, n = self.stages[s], self.n_prompts
        patches = patch_merge(x[:, n:, :] if n else x, st.merge, st.grid)
        if not n:
            return patches
        prompts = prompt_upsample(x[:, :n, :], st.upsample)
        return T.concat([prompts, patches], axis=1)

    def encode(self, images, adapters: bool = True, record: list | None = None, resume=None):
        """Run every stage; returns per-stage shared outputs, task features and TAMs.

        ``record`` collects a resumable state before each stage (and one after
        the last). Passing such a state as ``resume`` restarts from it, which
        is valid as long as nothing the earlier stages read has changed.
        """
        if resume is None:
            s0, x, shared, feats, tams = 0, self.embed(images), [], [], []
        else:
            s0, x, shared, feats, tams = resume
            shared, feats, tams = list(shared), list(feats), list(tams)
        for s in range(s0, len(self.stages)):
            if record is not None:
                record.append((s, x, tuple(shared), tuple(feats), tuple(tams)))
            x, per_task, tam = self.stage_forward(s, x, adapters)
            shared.append(x)
            feats.append(per_task)
            tams.append(tam)
            if s < len(self.stages) - 1:
                x = self.transition(s, x)
        if record is not None:
            record.append((len(self.stages), None, tuple(shared), tuple(feats), tuple(tams)))
        return shared, feats, tams

    def upsample_index(self, s: int) -> np.ndarray:
        h0, w0 = self.cfg.backbone.grid
        hs, ws = self.stages[s].grid
        ys, xs = np.divmod(np.arange(h0 * w0), w0)
        return (ys >> s) * ws + (xs >> s)

    def decode(self, stage_features) -> list:
        preds = []
        for i, head in enumerate(self.heads):
            parts = []
            for s, per_task in enumerate(stage_features):
                f = per_task[i]
                parts.append(f if s == 0 else T.index_select(f, 1, self.upsample_index(s)))
            preds.append(head(T.concat(parts, axis=-1) if len(parts) > 1 else parts[0]))
        return preds

    def forward(self, images, resume=None) -> ForwardResult:
        shared, feats, tams = self.encode(images, resume=resume)
        return ForwardResult(self.decode(feats), feats, tams, shared)

    __call__ = forward

    def frozen_forward(self, images):
        """Shared-path stage outputs with every adapter removed."""
        shared, _, _ = self.encode(images, adapters=False)
        return shared

    def num_params(self, trainable_only=False) -> int:
        return sum(t.size for n, t in self.params.items() if t.requires_grad or not trainable_only)
