"""Simplified hierarchical (Swin-like) encoder pieces.

Attention is global within a stage, so prompt tokens can attend to every
patch. Each block carries a learnable per-head relative-position table over
patch-patch offsets; pairs involving a prompt get zero bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class Linear:
    """Frozen-or-trainable dense layer, weight stored as (in, out)."""

    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]


@dataclass
class LayerNormWeights:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class BlockWeights:
    norm1: LayerNormWeights
    qkv: Linear
    pos_bias: Tensor  # (heads, (2h-1)(2w-1))
    proj: Linear
    norm2: LayerNormWeights
    fc1: Linear
    fc2: Linear
    heads: int
    grid: tuple


@lru_cache(maxsize=None)
def relative_position_index(h, w):
    """(N, N) index into a (2h-1)(2w-1) offset table, row-major tokens."""
    ys, xs = np.divmod(np.arange(h * w), w)
    dy = ys[:, None] - ys[None, :] + (h - 1)
    dx = xs[:, None] - xs[None, :] + (w - 1)
    return dy * (2 * w - 1) + dx


@lru_cache(maxsize=None)
def _bias_index(h, w, n_prompts):
    """Index over the table with one extra zero slot used by prompt pairs."""
    n = h * w
    zero_slot = (2 * h - 1) * (2 * w - 1)
    L = n_prompts + n
    idx = np.full((L, L), zero_slot, dtype=np.intp)
    idx[n_prompts:, n_prompts:] = relative_position_index(h, w)
    idx.setflags(write=False)
    return idx


def position_bias(table: Tensor, grid, n_prompts: int) -> Tensor:
    """Expand a per-head offset table to a (heads, L, L) additive bias."""
    h, w = grid
    H = table.shape[0]
    ext = T.concat([table, Tensor(np.zeros((H, 1)), dtype=table.dtype)], axis=1)
    idx = _bias_index(h, w, n_prompts)
    L = idx.shape[0]
    return T.index_select(ext, 1, idx.reshape(-1)).reshape(H, L, L)


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor, patch_size: int) -> Tensor:
    """Non-overlapping patch projection: (B, Cin, H, W) -> (B, N, C)."""
    B, Cin, Hp, Wp = image.shape
    p = patch_size
    if Hp % p or Wp % p:
        raise ConfigError(f"image extents {(Hp, Wp)} not divisible by patch size {p}", key="backbone.patch_size")
    h, w = Hp // p, Wp // p
    x = image.reshape(B, Cin, h, p, w, p).permute(0, 2, 4, 1, 3, 5).reshape(B, h * w, Cin * p * p)
    return F.linear(x, weight, bias)


def attention_from_qkv(qkv_out: Tensor, table: Tensor, heads: int, grid, n_prompts: int):
    """Multi-head self-attention given the fused q/k/v projection.

    Returns ``(f_qkv, A)``: the head-concatenated attention-weighted values
    (before the output projection) and the (B, H, L, L) attention map.
    """
    B, L, C3 = qkv_out.shape
    C = C3 // 3
    if C % heads:
        raise ConfigError(f"width {C} not divisible by {heads} heads", key="backbone.heads")
    d = C // heads
    qkv = qkv_out.reshape(B, L, 3, heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = F.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(d))
    scores = scores + position_bias(table, grid, n_prompts)
    A = F.softmax_lastdim(scores)
    out = F.matmul(A, v).permute(0, 2, 1, 3).reshape(B, L, C)
    return out, A


def attention_forward(tokens: Tensor, weights: BlockWeights, n_prompts: int = 0, qkv=None):
    C = weights.qkv.in_features
    if tokens.shape[-1] != C:
        raise DimensionError(f"token width {tokens.shape[-1]} does not match block width {C}")
    qkv = qkv or weights.qkv
    return attention_from_qkv(qkv(tokens), weights.pos_bias, weights.heads, weights.grid, n_prompts)


def mlp_forward(x: Tensor, weights: BlockWeights, fc1=None, fc2=None) -> Tensor:
    """linear -> GELU -> linear; ``fc1``/``fc2`` replace the frozen linears."""
    fc1 = fc1 or weights.fc1
    fc2 = fc2 or weights.fc2
    return fc2(F.gelu(fc1(x)))


def block_forward(x: Tensor, weights: BlockWeights, n_prompts: int = 0, qkv=None, proj=None, fc1=None, fc2=None):
    """Pre-norm transformer block; returns ``(out, f_qkv, A)``."""
    f, A = attention_forward(weights.norm1(x), weights, n_prompts, qkv)
    x = x + (proj or weights.proj)(f)
    x = x + mlp_forward(weights.norm2(x), weights, fc1, fc2)
    return x, f, A


def patch_merge(tokens: Tensor, merge_weight: Tensor, grid) -> Tensor:
    """Concatenate 2x2 neighbourhoods (order tl, tr, bl, br) and project 4C -> 2C."""
    B, N, C = tokens.shape
    h, w = grid
    if h * w != N:
        raise DimensionError(f"{N} tokens do not fill a {h}x{w} grid")
    if h % 2 or w % 2:
        raise ConfigError(f"patch merging needs even grid extents, got {h}x{w}", key="backbone.grid")
    x = tokens.reshape(B, h // 2, 2, w // 2, 2, C).permute(0, 1, 3, 2, 4, 5).reshape(B, N // 4, 4 * C)
    return F.matmul(x, merge_weight)
