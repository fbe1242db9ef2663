"""Trainable adaptation machinery: LoRA modules, task prompts, the
prompt-conditioned feature operator, dynamic task filters and gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import Linear
from .config import TuningMode
from .errors import ConfigError, DimensionError, UnsupportedHostError
from .tensor import Tensor


@dataclass(frozen=True)
class Routing:
    """Which pieces of the architecture a tuning mode switches on."""

    prompts: bool
    ts_lora: bool
    task_path: bool
    tpc: bool
    dtf: bool
    gate: bool


ROUTING = {
    TuningMode.FULL_FINETUNE: Routing(True, True, True, True, True, True),
    TuningMode.DECODERS_ONLY: Routing(False, False, False, False, False, False),
    TuningMode.SHARED_LORA_ONLY: Routing(False, True, False, False, False, False),
    TuningMode.TPC_ONLY: Routing(True, True, True, True, False, True),
    TuningMode.DTF_ONLY: Routing(False, True, True, False, True, False),
    TuningMode.TP_DTF_NO_TAM: Routing(True, True, True, False, True, True),
    TuningMode.TADFORMER: Routing(True, True, True, True, True, True),
}


def routing(mode) -> Routing:
    return ROUTING[TuningMode.parse(mode)]


@dataclass
class TsModule:
    """Frozen host linear plus a parallel low-rank path."""

    host: Linear
    down: Tensor  # (in, r)
    up: Tensor  # (r, out)

    def __call__(self, x):
        return ts_forward(self, x)


@dataclass
class DtfGenerator:
    weight: Tensor  # (r, r*k*k), no bias
    scale: Tensor  # (r,)
    kernel: int
    eps: float = 1e-5

    @property
    def rank(self):
        return self.weight.shape[0]


@dataclass
class TaModule:
    """LoRA pair with a dynamic task filter between down and up projections.

    One instance is shared by every task; only the generated filters differ.
    """

    host: Linear
    down: Tensor
    up: Tensor
    generator: DtfGenerator | None = None


def ts_forward(ts: TsModule, x: Tensor) -> Tensor:
    return ts.host(x) + F.matmul(F.matmul(x, ts.down), ts.up)


def lora_merge(ts: TsModule) -> np.ndarray:
    """Dense weight equivalent to the host plus its low-rank update."""
    if not isinstance(ts.host, Linear):
        raise UnsupportedHostError(f"cannot merge into host of type {type(ts.host).__name__}")
    return ts.host.weight.data + ts.down.data @ ts.up.data


def prepend_task_prompts(patch_tokens: Tensor, prompts: Tensor) -> Tensor:
    B, N, C = patch_tokens.shape
    Tn = prompts.shape[0]
    if Tn == 0:
        return patch_tokens
    if prompts.shape[-1] != C:
        raise DimensionError(f"prompt width {prompts.shape[-1]} does not match token width {C}")
    p = prompts.reshape(1, Tn, C) + Tensor(np.zeros((B, 1, 1)), dtype=prompts.dtype)
    return T.concat([p, patch_tokens], axis=1)


def extract_task_attention_map(A: Tensor, n_tasks: int) -> Tensor:
    """Prompt-to-patch rows of the attention map, (B, H, T, N); no renormalisation."""
    L = A.shape[-1]
    if n_tasks < 1 or n_tasks >= L:
        raise DimensionError(f"cannot take {n_tasks} prompt rows from a sequence of length {L}")
    return A[:, :, :n_tasks, n_tasks:]


def tpc_adapt(f_qkv: Tensor, tam: Tensor) -> list:
    """Per-task features ``f + S_inv(a_i * S(f))``.

    Head ``h`` owns channels ``[h*C/H, (h+1)*C/H)``; each task's attention
    row over patches scales the channels of the matching head.
    """
    B, N, C = f_qkv.shape
    H, Tn = tam.shape[1], tam.shape[2]
    if C % H:
        raise ConfigError(f"width {C} not divisible by {H} heads", key="backbone.heads")
    if tam.shape != (B, H, Tn, N):
        raise DimensionError(f"task attention map {tam.shape} does not match features {f_qkv.shape}")
    fh = f_qkv.reshape(B, N, H, C // H)
    a = tam.permute(0, 3, 2, 1)  # (B, N, T, H)
    out = []
    for i in range(Tn):
        ai = a[:, :, i, :].reshape(B, N, H, 1)
        out.append(f_qkv + (fh * ai).reshape(B, N, C))
    return out


def _tokens_to_grid(z: Tensor, grid) -> Tensor:
    B, N, r = z.shape
    h, w = grid
    if h * w != N:
        raise DimensionError(f"{N} tokens do not fill a {h}x{w} grid")
    return z.permute(0, 2, 1).reshape(B, r, h, w)


def _grid_to_tokens(x: Tensor) -> Tensor:
    B, r, h, w = x.shape
    return x.reshape(B, r, h * w).permute(0, 2, 1)


def filter_norm(raw: Tensor, scale: Tensor, eps: float) -> Tensor:
    """Standardise each k x k filter over its taps, then scale per channel."""
    mu = raw.mean(axis=(2, 3), keepdims=True)
    centred = raw - mu
    std = T.sqrt(T.square(centred).mean(axis=(2, 3), keepdims=True))
    return centred / (std + eps) * scale.reshape(1, -1, 1, 1)


def dtf_generate(gen: DtfGenerator, z: Tensor, grid, normalize: bool = True) -> Tensor:
    """Instance-conditioned depthwise filters (B, r, k, k) from down-projected tokens."""
    B, N, r = z.shape
    if r != gen.rank:
        raise DimensionError(f"generator rank {gen.rank} does not match features of width {r}")
    pooled = F.global_avg_pool(_tokens_to_grid(z, grid))
    raw = F.matmul(pooled, gen.weight).reshape(B, r, gen.kernel, gen.kernel)
    return filter_norm(raw, gen.scale, gen.eps) if normalize else raw


def ta_forward(ta: TaModule, f: Tensor, grid, theta: Tensor | None = None, normalize: bool = True) -> Tensor:
    """Host(f) + (theta * (f W_down)) W_up with theta generated from f itself.

    Without a generator (and no explicit ``theta``) this is a plain LoRA path.
    """
    z = F.matmul(f, ta.down)
    if theta is None and ta.generator is not None:
        theta = dtf_generate(ta.generator, z, grid, normalize)
    if theta is not None:
        z = _grid_to_tokens(F.depthwise_conv2d(_tokens_to_grid(z, grid), theta))
    return ta.host(f) + F.matmul(z, ta.up)


def gated_output(f: Tensor, f_hat: Tensor, g: Tensor) -> Tensor:
    """sigmoid(g) * f + (1 - sigmoid(g)) * f_hat."""
    if f.shape != f_hat.shape:
        raise DimensionError(f"gate operands differ in shape: {f.shape} vs {f_hat.shape}")
    s = T.sigmoid(g)
    return f * s + f_hat * (1.0 - s)


def prompt_upsample(prompts: Tensor, U: Tensor) -> Tensor:
    """Carry prompts to the next stage: C -> 2C per prompt."""
    if prompts.shape[-1] != U.shape[0]:
        raise DimensionError(f"prompt width {prompts.shape[-1]} does not match upsampler {U.shape}")
    return F.matmul(prompts, U)


# ---------------------------------------------------------------------------
# trainable-set selection

GROUPS = ("backbone", "ts-lora", "ta-lora", "dtf", "prompts", "upsamplers", "gates", "norms", "pos-bias", "heads")

_MODE_GROUPS = {
    TuningMode.DECODERS_ONLY: {"heads"},
    TuningMode.SHARED_LORA_ONLY: {"ts-lora", "norms", "pos-bias", "heads"},
    TuningMode.TPC_ONLY: {"ts-lora", "ta-lora", "prompts", "upsamplers", "gates", "norms", "pos-bias", "heads"},
    TuningMode.DTF_ONLY: {"ts-lora", "ta-lora", "dtf", "norms", "pos-bias", "heads"},
    TuningMode.TP_DTF_NO_TAM: {"ts-lora", "ta-lora", "dtf", "prompts", "upsamplers", "gates", "norms", "pos-bias", "heads"},
    TuningMode.TADFORMER: {"ts-lora", "ta-lora", "dtf", "prompts", "upsamplers", "gates", "norms", "pos-bias", "heads"},
    TuningMode.FULL_FINETUNE: set(GROUPS),
}


def param_group(name: str) -> str:
    """Budget group of a parameter from its name."""
    parts = name.split("/")
    root, leaf = parts[0], parts[-1]
    if root == "heads":
        return "heads"
    if root == "peft":
        if "prompts" in parts:
            return "prompts"
        if parts[1].startswith("upsample"):
            return "upsamplers"
        if leaf == "gate":
            return "gates"
        if "ta" in parts:
            return "dtf" if leaf in ("generator", "scale") else "ta-lora"
        return "ts-lora"
    if leaf in ("gamma", "beta"):
        return "norms"
    if leaf == "pos_bias":
        return "pos-bias"
    return "backbone"


def trainable_groups(mode) -> frozenset:
    return frozenset(_MODE_GROUPS[TuningMode.parse(mode)])


def configure_trainable_set(mode, model) -> list:
    """Set requires_grad flags for ``mode`` and return the sorted trainable names."""
    groups = trainable_groups(mode)
    names = []
    for name, t in model.params.items():
        t.requires_grad = param_group(name) in groups
        if t.requires_grad:
            names.append(name)
    return sorted(names)
