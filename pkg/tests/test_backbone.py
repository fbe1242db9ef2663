import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadformer import functional as F
from tadformer.backbone import (
    BlockWeights,
    LayerNormWeights,
    Linear,
    attention_forward,
    block_forward,
    patch_embed,
    patch_merge,
    relative_position_index,
)
from tadformer.config import toy_config
from tadformer.errors import ConfigError, DimensionError
from tadformer.gradcheck import TOLERANCE, check_function
from tadformer.tensor import Tensor


def make_block(rng, C=8, H=2, grid=(4, 4), hid=16, bias_scale=0.02):
    h, w = grid
    t = lambda *s: Tensor(rng.standard_normal(s) * 0.3)
    return BlockWeights(
        norm1=LayerNormWeights(Tensor(1 + 0.1 * rng.standard_normal(C)), t(C)),
        qkv=Linear(t(C, 3 * C), t(3 * C)),
        pos_bias=Tensor(bias_scale * rng.standard_normal((H, (2 * h - 1) * (2 * w - 1)))),
        proj=Linear(t(C, C), t(C)),
        norm2=LayerNormWeights(Tensor(1 + 0.1 * rng.standard_normal(C)), t(C)),
        fc1=Linear(t(C, hid), t(hid)),
        fc2=Linear(t(hid, C), t(C)),
        heads=H,
        grid=grid,
    )


def reference_attention(x, bw, n_prompts):
    """Loop-over-heads attention in float64."""
    x = x.astype(np.float64)
    B, L, C = x.shape
    H = bw.heads
    d = C // H
    qkv = x @ bw.qkv.weight.data.astype(np.float64) + bw.qkv.bias.data
    q, k, v = qkv[..., :C], qkv[..., C : 2 * C], qkv[..., 2 * C :]
    h, w = bw.grid
    rel = relative_position_index(h, w)
    f = np.zeros((B, L, C))
    A = np.zeros((B, H, L, L))
    for hh in range(H):
        sl = slice(hh * d, (hh + 1) * d)
        s = q[..., sl] @ k[..., sl].transpose(0, 2, 1) / np.sqrt(d)
        bias = np.zeros((L, L))
        bias[n_prompts:, n_prompts:] = bw.pos_bias.data[hh][rel]
        s = s + bias
        e = np.exp(s - s.max(-1, keepdims=True))
        a = e / e.sum(-1, keepdims=True)
        A[:, hh] = a
        f[..., sl] = a @ v[..., sl]
    return f, A


def test_relative_position_index_symmetry():
    idx = relative_position_index(3, 2)
    assert idx.shape == (6, 6)
    centre = (2 * 3 - 1) * (2 * 2 - 1) // 2
    assert np.all(np.diag(idx) == centre)
    # offset (i -> j) and (j -> i) sit symmetrically around the centre
    assert np.all(idx + idx.T == 2 * centre)


@pytest.mark.parametrize("n_prompts", [0, 1, 3])
def test_attention_matches_reference(n_prompts):
    rng = np.random.default_rng(n_prompts)
    bw = make_block(rng)
    x = rng.standard_normal((2, n_prompts + 16, 8))
    f, A = attention_forward(Tensor(x), bw, n_prompts)
    f_ref, A_ref = reference_attention(x.astype(np.float32), bw, n_prompts)
    assert np.abs(A.data - A_ref).max() <= 1e-6
    assert np.abs(f.data - f_ref).max() <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_attention_rows_sum_to_one(seed, n_prompts):
    rng = np.random.default_rng(seed)
    bw = make_block(rng, bias_scale=1.0)
    x = rng.standard_normal((1, n_prompts + 16, 8)) * 3
    _, A = attention_forward(Tensor(x), bw, n_prompts)
    assert np.abs(A.data.sum(-1) - 1).max() <= 1e-6


def test_attention_is_permutation_equivariant_without_bias():
    rng = np.random.default_rng(11)
    bw = make_block(rng, bias_scale=0.0)
    x = rng.standard_normal((1, 16, 8))
    perm = rng.permutation(16)
    f, _ = attention_forward(Tensor(x), bw)
    fp, _ = attention_forward(Tensor(x[:, perm]), bw)
    inv = np.argsort(perm)
    assert np.abs(fp.data[:, inv] - f.data).max() <= 1e-5


def test_prompt_pairs_get_no_position_bias():
    rng = np.random.default_rng(3)
    bw = make_block(rng, bias_scale=5.0)
    x = rng.standard_normal((1, 2 + 16, 8))
    _, A = attention_forward(Tensor(x), bw, n_prompts=2)
    zero = make_block(np.random.default_rng(3), bias_scale=5.0)
    zero.pos_bias = Tensor(np.zeros_like(bw.pos_bias.data))
    _, A0 = attention_forward(Tensor(x), zero, n_prompts=2)
    # prompt rows only see prompt-involved pairs, so they are bias-free
    assert np.array_equal(A.data[:, :, :2], A0.data[:, :, :2])
    assert not np.allclose(A.data[:, :, 2:], A0.data[:, :, 2:])


def test_block_forward_replays_ops():
    rng = np.random.default_rng(5)
    bw = make_block(rng)
    x = Tensor(rng.standard_normal((2, 17, 8)))
    out, f, A = block_forward(x, bw, n_prompts=1)
    f2, _ = attention_forward(bw.norm1(x), bw, 1)
    y = x + bw.proj(f2)
    ref = y + bw.fc2(F.gelu(bw.fc1(bw.norm2(y))))
    assert np.array_equal(out.data, ref.data)


def test_two_block_stage_equals_manual_composition():
    rng = np.random.default_rng(6)
    b1, b2 = make_block(rng), make_block(rng)
    x = Tensor(rng.standard_normal((1, 16, 8)))
    y, _, _ = block_forward(x, b1)
    z, _, _ = block_forward(y, b2)
    a = x + b1.proj(attention_forward(b1.norm1(x), b1)[0])
    a = a + b1.fc2(F.gelu(b1.fc1(b1.norm2(a))))
    c = a + b2.proj(attention_forward(b2.norm1(a), b2)[0])
    c = c + b2.fc2(F.gelu(b2.fc1(b2.norm2(c))))
    assert np.array_equal(z.data, c.data)


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    bw = make_block(rng)

    def fn(args):
        x, table = args
        blk = BlockWeights(bw.norm1, bw.qkv, table, bw.proj, bw.norm2, bw.fc1, bw.fc2, bw.heads, bw.grid)
        return block_forward(x, blk, n_prompts=2)[0]

    errs = check_function(fn, [rng.standard_normal((1, 18, 8)), bw.pos_bias.data.astype(np.float64)], seed=8)
    assert max(errs) <= TOLERANCE


# ---------------------------------------------------------------- patch embed / merge


def test_patch_embed_vs_loop():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((1, 3, 4, 6))
    W, b = rng.standard_normal((12, 5)), rng.standard_normal(5)
    out = patch_embed(Tensor(img), Tensor(W), Tensor(b), 2).data
    img32, W32, b32 = (a.astype(np.float32).astype(np.float64) for a in (img, W, b))
    for i in range(2):
        for j in range(3):
            patch = img32[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].reshape(-1)
            assert np.abs(out[0, i * 3 + j] - (patch @ W32 + b32)).max() <= 1e-5


def test_patch_embed_indivisible():
    with pytest.raises(ConfigError):
        patch_embed(Tensor(np.zeros((1, 3, 5, 4))), Tensor(np.zeros((12, 2))), Tensor(np.zeros(2)), 2)


def test_patch_merge_zero_tokens():
    out = patch_merge(Tensor(np.zeros((1, 16, 3))), Tensor(np.ones((12, 6))), (4, 4))
    assert out.shape == (1, 4, 6) and not out.data.any()


def test_patch_merge_selects_top_left():
    C = 3
    rng = np.random.default_rng(1)
    tokens = rng.standard_normal((1, 4, C)).astype(np.float32)
    W = np.zeros((4 * C, 2 * C))
    W[:C, :C] = np.eye(C)
    out = patch_merge(Tensor(tokens), Tensor(W), (2, 2)).data
    np.testing.assert_array_equal(out[0, 0], np.concatenate([tokens[0, 0], np.zeros(C)]))


def test_patch_merge_vs_gather_oracle():
    rng = np.random.default_rng(2)
    h, w, C = 4, 6, 2
    tokens = rng.standard_normal((2, h * w, C))
    W = rng.standard_normal((4 * C, 2 * C))
    out = patch_merge(Tensor(tokens), Tensor(W), (h, w)).data
    t32, W32 = tokens.astype(np.float32).astype(np.float64), W.astype(np.float32).astype(np.float64)
    grid = t32.reshape(2, h, w, C)
    for i in range(h // 2):
        for j in range(w // 2):
            cat = np.concatenate(
                [grid[:, 2 * i, 2 * j], grid[:, 2 * i, 2 * j + 1], grid[:, 2 * i + 1, 2 * j], grid[:, 2 * i + 1, 2 * j + 1]], axis=-1
            )
            assert np.abs(out[:, i * (w // 2) + j] - cat @ W32).max() <= 1e-5


@pytest.mark.parametrize("grid,exc", [((3, 4), ConfigError), ((4, 3), ConfigError)])
def test_patch_merge_odd_extent(grid, exc):
    n = grid[0] * grid[1]
    with pytest.raises(exc):
        patch_merge(Tensor(np.zeros((1, n, 2))), Tensor(np.zeros((8, 4))), grid)


def test_patch_merge_token_count_mismatch():
    with pytest.raises(DimensionError):
        patch_merge(Tensor(np.zeros((1, 10, 2))), Tensor(np.zeros((8, 4))), (4, 4))


def test_attention_width_mismatch():
    bw = make_block(np.random.default_rng(0))
    with pytest.raises(DimensionError):
        attention_forward(Tensor(np.zeros((1, 16, 6))), bw)


def test_plain_stage_without_tasks():
    """With no tasks the model degenerates to a plain encoder."""
    from tadformer.config import ModelConfig
    from tadformer.model import TADFormer

    cfg = toy_config().model
    plain = ModelConfig(backbone=cfg.backbone, rank=cfg.rank, kernel=cfg.kernel, tasks=())
    model = TADFormer(plain, "tadformer")
    images = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    shared, feats, tams = model.encode(images)
    assert all(f == [] for f in feats)
    assert all(t is None for t in tams)
    assert shared[0].shape == (1, 16, 8)
