import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadformer import functional as F
from tadformer.backbone import Linear, block_forward
from tadformer.config import TuningMode, toy_config
from tadformer.errors import ConfigError, DimensionError, UnsupportedHostError
from tadformer.gradcheck import TOLERANCE, check_function
from tadformer.model import TADFormer
from tadformer.peft import (
    DtfGenerator,
    TaModule,
    TsModule,
    configure_trainable_set,
    dtf_generate,
    extract_task_attention_map,
    filter_norm,
    gated_output,
    lora_merge,
    param_group,
    prepend_task_prompts,
    prompt_upsample,
    ta_forward,
    tpc_adapt,
    ts_forward,
)
from tadformer.tensor import Tensor


def rand_ts(rng, cin=8, cout=8, r=2, up_scale=0.3):
    host = Linear(Tensor(rng.standard_normal((cin, cout))), Tensor(rng.standard_normal(cout)))
    return TsModule(host, Tensor(rng.standard_normal((cin, r))), Tensor(up_scale * rng.standard_normal((r, cout))))


# ---------------------------------------------------------------- TS module / merge


def test_ts_zero_up_equals_host():
    rng = np.random.default_rng(0)
    ts = rand_ts(rng, up_scale=0.0)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    assert np.array_equal(ts_forward(ts, x).data, ts.host(x).data)


def test_ts_zero_input_gives_bias():
    rng = np.random.default_rng(1)
    ts = rand_ts(rng)
    out = ts_forward(ts, Tensor(np.zeros((1, 3, 8)))).data
    assert np.array_equal(out, np.broadcast_to(ts.host.bias.data, out.shape))


def test_ts_vs_float64_reference():
    rng = np.random.default_rng(2)
    ts = rand_ts(rng)
    x = rng.standard_normal((4, 8)).astype(np.float32)
    d = lambda t: t.data.astype(np.float64)
    ref = x @ d(ts.host.weight) + d(ts.host.bias) + (x @ d(ts.down)) @ d(ts.up)
    assert np.abs(ts_forward(ts, Tensor(x)).data - ref).max() <= 1e-5


def test_lora_merge_zero_up_is_host_bitwise():
    ts = rand_ts(np.random.default_rng(3), up_scale=0.0)
    assert np.array_equal(lora_merge(ts), ts.host.weight.data)


def test_lora_merge_rank_one_by_hand():
    host = Linear(Tensor([[1.0, 0.0], [0.0, 1.0]]))
    ts = TsModule(host, Tensor([[1.0], [2.0]]), Tensor([[3.0, 4.0]]))
    np.testing.assert_array_equal(lora_merge(ts), [[4.0, 4.0], [6.0, 9.0]])


def test_lora_merge_forward_matches_unmerged():
    rng = np.random.default_rng(4)
    ts = rand_ts(rng, r=2)
    x = Tensor(rng.standard_normal((3, 8)))
    merged = F.linear(x, Tensor(lora_merge(ts)), ts.host.bias).data
    unmerged = ts_forward(ts, x).data
    assert np.abs(merged - unmerged).max() / np.abs(unmerged).max() <= 1e-5


def test_lora_merge_rejects_non_linear_host():
    ts = TsModule(lambda x: x, Tensor(np.zeros((2, 1))), Tensor(np.zeros((1, 2))))
    with pytest.raises(UnsupportedHostError):
        lora_merge(ts)


# ---------------------------------------------------------------- prompts / TAM / TPC


def test_prepend_prompts_layout():
    patches = Tensor(np.arange(2 * 3 * 2).reshape(2, 3, 2))
    prompts = Tensor([[9.0, 8.0]])
    out = prepend_task_prompts(patches, prompts).data
    assert out.shape == (2, 4, 2)
    np.testing.assert_array_equal(out[:, 0], [[9, 8], [9, 8]])
    np.testing.assert_array_equal(out[:, 1:], patches.data)


def test_prepend_width_mismatch():
    with pytest.raises(DimensionError):
        prepend_task_prompts(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 3))))


def test_tam_matches_slice_oracle_bitwise():
    rng = np.random.default_rng(5)
    B, H, T, N = 2, 3, 2, 6
    A = rng.random((B, H, T + N, T + N)).astype(np.float32)
    tam = extract_task_attention_map(Tensor(A), T).data
    oracle = np.empty((B, H, T, N), dtype=np.float32)
    for b in range(B):
        for h in range(H):
            for i in range(T):
                for n in range(N):
                    oracle[b, h, i, n] = A[b, h, i, T + n]
    assert np.array_equal(tam, oracle)


@pytest.mark.parametrize("T", [0, 5])
def test_tam_rejects_bad_prompt_count(T):
    with pytest.raises(DimensionError):
        extract_task_attention_map(Tensor(np.zeros((1, 1, 5, 5))), T)


def tpc_oracle(f, tam):
    """Index-level form: channel c of token n belongs to head c // (C/H)."""
    B, N, C = f.shape
    H, T = tam.shape[1], tam.shape[2]
    d = C // H
    out = []
    for i in range(T):
        o = np.empty_like(f, dtype=np.float64)
        for b in range(B):
            for n in range(N):
                for c in range(C):
                    o[b, n, c] = f[b, n, c] + tam[b, c // d, i, n] * f[b, n, c]
        out.append(o)
    return out


def test_tpc_matches_index_oracle():
    rng = np.random.default_rng(6)
    f = rng.standard_normal((2, 5, 6)).astype(np.float32)
    tam = rng.random((2, 3, 2, 5)).astype(np.float32)
    got = tpc_adapt(Tensor(f), Tensor(tam))
    for g, o in zip(got, tpc_oracle(f.astype(np.float64), tam.astype(np.float64))):
        assert np.abs(g.data - o).max() <= 1e-6


def test_tpc_zero_tam_is_identity():
    f = np.random.default_rng(7).standard_normal((1, 4, 4)).astype(np.float32)
    for out in tpc_adapt(Tensor(f), Tensor(np.zeros((1, 2, 3, 4)))):
        assert np.array_equal(out.data, f)


def test_tpc_uniform_tam_scales_features():
    f = np.random.default_rng(8).standard_normal((1, 4, 4)).astype(np.float32)
    out = tpc_adapt(Tensor(f), Tensor(np.full((1, 2, 1, 4), 0.25)))[0]
    np.testing.assert_allclose(out.data, 1.25 * f, rtol=1e-6)


def test_tpc_shape_mismatch():
    with pytest.raises(DimensionError):
        tpc_adapt(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 2, 1, 5))))
    with pytest.raises(ConfigError):
        tpc_adapt(Tensor(np.zeros((1, 4, 5))), Tensor(np.zeros((1, 2, 1, 4))))


# ---------------------------------------------------------------- DTF / TA module


def make_ta(rng, C=8, r=4, k=3, grid=(4, 4), up_scale=0.3, with_gen=True):
    host = Linear(Tensor(rng.standard_normal((C, C))), Tensor(rng.standard_normal(C)))
    gen = DtfGenerator(Tensor(rng.standard_normal((r, r * k * k))), Tensor(np.ones(r)), k) if with_gen else None
    return TaModule(host, Tensor(rng.standard_normal((C, r))), Tensor(up_scale * rng.standard_normal((r, C))), gen)


def test_filter_norm_standardises_each_filter():
    raw = np.random.default_rng(9).standard_normal((2, 3, 3, 3)) * 5 + 2
    out = filter_norm(Tensor(raw), Tensor(np.ones(3)), 1e-5).data
    assert np.abs(out.mean(axis=(2, 3))).max() <= 1e-5
    assert np.abs(out.std(axis=(2, 3)) - 1).max() <= 1e-4


def test_filter_norm_scale_is_per_channel():
    raw = Tensor(np.random.default_rng(10).standard_normal((1, 2, 3, 3)))
    a = filter_norm(raw, Tensor([1.0, 1.0]), 1e-5).data
    b = filter_norm(raw, Tensor([2.0, -1.0]), 1e-5).data
    np.testing.assert_allclose(b[0, 0], 2 * a[0, 0], rtol=1e-6)
    np.testing.assert_allclose(b[0, 1], -a[0, 1], rtol=1e-6)


def test_dtf_generator_parameter_count():
    gen = DtfGenerator(Tensor(np.zeros((32, 32 * 9))), Tensor(np.ones(32)), 3)
    assert gen.weight.size == 9216
    assert gen.weight.size + gen.scale.size == 9248


def test_dtf_zero_generator_gives_zero_filters():
    gen = DtfGenerator(Tensor(np.zeros((4, 36))), Tensor(np.ones(4)), 3)
    z = Tensor(np.random.default_rng(11).standard_normal((2, 16, 4)))
    theta = dtf_generate(gen, z, (4, 4)).data
    assert theta.shape == (2, 4, 3, 3) and not theta.any()


def test_dtf_distinct_samples_distinct_filters():
    rng = np.random.default_rng(12)
    gen = DtfGenerator(Tensor(rng.standard_normal((4, 36))), Tensor(np.ones(4)), 3)
    theta = dtf_generate(gen, Tensor(rng.standard_normal((2, 16, 4))), (4, 4)).data
    assert np.abs(theta[0] - theta[1]).max() > 1e-6


def test_dtf_raw_vs_oracle():
    rng = np.random.default_rng(13)
    W = rng.standard_normal((4, 36))
    z = rng.standard_normal((1, 16, 4))
    raw = dtf_generate(DtfGenerator(Tensor(W), Tensor(np.ones(4)), 3), Tensor(z), (4, 4), normalize=False).data
    z32, W32 = z.astype(np.float32).astype(np.float64), W.astype(np.float32).astype(np.float64)
    ref = (z32.mean(axis=1) @ W32).reshape(1, 4, 3, 3)
    assert np.abs(raw - ref).max() <= 1e-5


def test_ta_zero_up_is_host():
    rng = np.random.default_rng(14)
    ta = make_ta(rng, up_scale=0.0)
    f = Tensor(rng.standard_normal((2, 16, 8)))
    assert np.array_equal(ta_forward(ta, f, (4, 4)).data, ta.host(f).data)


def test_ta_delta_kernels_reduce_to_ts():
    rng = np.random.default_rng(15)
    ta = make_ta(rng)
    f = Tensor(rng.standard_normal((2, 16, 8)))
    delta = np.zeros((2, 4, 3, 3))
    delta[:, :, 1, 1] = 1.0
    got = ta_forward(ta, f, (4, 4), theta=Tensor(delta), normalize=False).data
    ref = ts_forward(TsModule(ta.host, ta.down, ta.up), f).data
    assert np.abs(got - ref).max() <= 1e-6


def test_ta_vs_unrolled_oracle():
    from tests.test_tensor import naive_depthwise

    rng = np.random.default_rng(16)
    ta = make_ta(rng)
    f = rng.standard_normal((1, 16, 8)).astype(np.float32)
    got = ta_forward(ta, Tensor(f), (4, 4)).data
    d = lambda t: t.data.astype(np.float64)
    z = f @ d(ta.down)
    raw = (z.mean(axis=0 if z.ndim == 2 else 1) @ d(ta.generator.weight)).reshape(1, 4, 3, 3)
    mu = raw.mean(axis=(2, 3), keepdims=True)
    sd = np.sqrt(((raw - mu) ** 2).mean(axis=(2, 3), keepdims=True))
    theta = (raw - mu) / (sd + 1e-5)
    zg = z.transpose(0, 2, 1).reshape(1, 4, 4, 4)
    conv = naive_depthwise(zg, theta).reshape(1, 4, 16).transpose(0, 2, 1)
    ref = f @ d(ta.host.weight) + d(ta.host.bias) + conv @ d(ta.up)
    assert np.abs(got - ref).max() <= 1e-5


def test_ta_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    ta = make_ta(rng, up_scale=1.0)

    def fn(args):
        f, down, up, W, scale = args
        m = TaModule(ta.host, down, up, DtfGenerator(W, scale, 3))
        return ta_forward(m, f, (4, 4))

    inputs = [rng.standard_normal((2, 16, 8)), ta.down.data, ta.up.data, ta.generator.weight.data, 1 + 0.2 * rng.standard_normal(4)]
    assert max(check_function(fn, [np.asarray(a, np.float64) for a in inputs], seed=17)) <= TOLERANCE


# ---------------------------------------------------------------- gate / upsample


def test_gate_zero_is_average():
    f, fh = Tensor([1.0, 2.0]), Tensor([3.0, 6.0])
    np.testing.assert_array_equal(gated_output(f, fh, Tensor([0.0])).data, [2.0, 4.0])


def test_gate_saturates():
    f, fh = Tensor([1.0, -2.0]), Tensor([5.0, 7.0])
    assert np.abs(gated_output(f, fh, Tensor([20.0])).data - f.data).max() <= 1e-6


def test_gate_ln3():
    f, fh = Tensor([4.0]), Tensor([8.0])
    out = gated_output(f, fh, Tensor([math.log(3.0)])).data
    assert abs(out[0] - (0.75 * 4 + 0.25 * 8)) <= 1e-6


def test_gate_shape_mismatch():
    with pytest.raises(DimensionError):
        gated_output(Tensor([1.0]), Tensor([1.0, 2.0]), Tensor([0.0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-30, 30), st.integers(0, 1000))
def test_gate_is_convex_combination(g, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    out = gated_output(Tensor(a), Tensor(b), Tensor([g])).data
    lo, hi = np.minimum(a, b).astype(np.float32), np.maximum(a, b).astype(np.float32)
    assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)


def test_prompt_upsample():
    rng = np.random.default_rng(18)
    p, U = rng.standard_normal((3, 4)), rng.standard_normal((4, 8))
    assert not prompt_upsample(Tensor(p), Tensor(np.zeros((4, 8)))).data.any()
    ref = p.astype(np.float32).astype(np.float64) @ U.astype(np.float32).astype(np.float64)
    assert np.abs(prompt_upsample(Tensor(p), Tensor(U)).data - ref).max() <= 1e-5
    with pytest.raises(DimensionError):
        prompt_upsample(Tensor(p), Tensor(np.zeros((3, 6))))


def test_upsampler_vs_merge_parameter_counts():
    C = 96
    assert 2 * C * C == 18432
    assert 4 * C * 2 * C == 73728


# ---------------------------------------------------------------- trainable sets


@pytest.mark.parametrize("mode", list(TuningMode))
def test_trainable_set_is_sorted_and_flags_match(mode):
    model = TADFormer(toy_config().model, mode)
    names = configure_trainable_set(mode, model)
    assert names == sorted(names)
    assert set(names) == {n for n, t in model.params.items() if t.requires_grad}
    if mode is TuningMode.FULL_FINETUNE:
        assert set(names) == set(model.params)
    else:
        assert not any("merge" in n or n.startswith("backbone/patch_embed") for n in names)


def test_decoders_only_trains_heads_only():
    model = TADFormer(toy_config().model, "decoders_only")
    assert all(n.startswith("heads/") for n in model.trainable)


@pytest.mark.parametrize(
    "mode,present,absent",
    [
        ("dtf_only", {"dtf", "ta-lora"}, {"prompts", "gates", "upsamplers"}),
        ("tpc_only", {"prompts", "gates", "ta-lora"}, {"dtf"}),
        ("tp_dtf_no_tam", {"prompts", "dtf", "gates"}, set()),
        ("shared_lora_only", {"ts-lora", "norms", "pos-bias", "heads"}, {"ta-lora", "dtf", "prompts", "gates"}),
    ],
)
def test_ablation_group_membership(mode, present, absent):
    groups = {param_group(n) for n in TADFormer(toy_config().model, mode).trainable}
    assert present <= groups
    assert not (absent & groups)


def test_unknown_mode():
    with pytest.raises(ConfigError):
        TADFormer(toy_config().model, "everything")


# ---------------------------------------------------------------- model-level properties


def toy_images(seed=0, B=2):
    return np.random.default_rng(seed).standard_normal((B, 3, 4, 4))


def test_identity_at_init_shared_path_bitwise():
    model = TADFormer(toy_config().model, "tadformer")
    assert all(not t.data.any() for n, t in model.params.items() if n.endswith("/up"))
    out = model(toy_images())
    frozen = model.frozen_forward(toy_images())
    for s, (a, b) in enumerate(zip(out.shared, frozen)):
        assert np.array_equal(a.data, b.data), s


def last_block_inputs(model, s, x):
    """Input to the task-adapting block of stage ``s`` plus its f_qkv and A."""
    st_ = model.stages[s]
    h = x
    for b, bw in enumerate(st_.blocks[:-1]):
        h, _, _ = block_forward(h, bw, model.n_prompts, **st_.ts[b])
    _, f_full, A = block_forward(h, st_.blocks[-1], model.n_prompts, **st_.ts[-1])
    return h, f_full, A


def test_identity_at_init_gate_average():
    model = TADFormer(toy_config().model, "tadformer")
    n = model.n_prompts
    x = model.embed(toy_images())
    for s, st_ in enumerate(model.stages):
        h, f_full, A = last_block_inputs(model, s, x)
        outs, feats, _ = model.task_path(s, h, f_full, A)
        bw = st_.blocks[-1]
        for F_i, f_i in zip(outs, feats):
            # with every W_up at zero, f_hat is the frozen proj/MLP tail applied to f_i
            y = h[:, n:] + bw.proj(f_i)
            f_hat = y + bw.fc2(F.gelu(bw.fc1(bw.norm2(y))))
            assert np.abs(F_i.data - 0.5 * (f_i.data + f_hat.data)).max() <= 1e-6
        x, _, _ = model.stage_forward(s, x)
        if s < len(model.stages) - 1:
            x = model.transition(s, x)


def test_dtf_conditioning_across_samples_and_tasks():
    model = TADFormer(toy_config().model, "tadformer", seed=3)
    rng = np.random.default_rng(3)
    for name, t in model.params.items():
        if name.endswith("/up"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
    n = model.n_prompts
    _, f_full, A = last_block_inputs(model, 0, model.embed(toy_images(1)))
    feats = tpc_adapt(f_full[:, n:], extract_task_attention_map(A, n))
    st_ = model.stages[0]
    ta = st_.ta["proj"]
    thetas = [dtf_generate(ta.generator, F.matmul(f, ta.down), st_.grid).data for f in feats]
    assert np.abs(thetas[0][0] - thetas[0][1]).max() > 1e-6
    assert np.abs(feats[0].data - feats[1].data).max() > 0
    assert np.abs(thetas[0] - thetas[1]).max() > 1e-6
