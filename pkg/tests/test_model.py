import copy

import numpy as np
import pytest
from scipy.special import erf

from ceit import config as cfgmod
from ceit import tensor as T
from ceit.model import CeiT, ForwardRecord, TokenSequence, flatten_grid, parameter_shapes, spatial_restore
from ceit.tensor import ShapeError, Tensor
from ceit.training import I2T_ARMS


def np_gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def tiny(**kw):
    base = dict(image_size=16, i2t=cfgmod.I2TConfig(channels=4), patch_size=1, depth=2, embed_dim=8, heads=2, num_classes=3)
    base.update(kw)
    return cfgmod.ModelConfig(**base).validate()


# -- I2T and tokenization ------------------------------------------------------------


def test_i2t_default_224_gives_56x56x32():
    m = CeiT(cfgmod.preset("ceit-t"), init="zeros").eval()
    with T.no_grad():
        out = m.i2t_forward(Tensor(np.zeros((1, 3, 224, 224))))
    assert out.shape == (1, 32, 56, 56)


def test_i2t_k7s4_arm_gives_56x56x64():
    cfg = cfgmod.preset("ceit-t")
    cfg.i2t = copy.deepcopy(I2T_ARMS["k7s4"])
    m = CeiT(cfg.validate(), init="zeros").eval()
    with T.no_grad():
        out = m.i2t_forward(Tensor(np.zeros((1, 3, 224, 224))))
    assert out.shape == (1, 64, 56, 56)


def test_i2t_disabled_is_identity(rng):
    cfg = tiny(i2t=cfgmod.I2TConfig(enabled=False), patch_size=4)
    x = Tensor(rng.normal(size=(2, 3, 16, 16)))
    assert CeiT(cfg).i2t_forward(x) is x


def test_patch_embed_token_counts():
    m = CeiT(cfgmod.preset("ceit-t"), init="zeros")
    seq = m.patch_embed(Tensor(np.zeros((1, 32, 56, 56))))
    assert seq.tokens.shape == (1, 197, 192) and seq.num_patches == 196
    deit = CeiT(cfgmod.preset("deit-t"), init="zeros")
    seq = deit.patch_embed(Tensor(np.zeros((1, 3, 224, 224))))
    assert seq.tokens.shape == (1, 197, 192)


def test_patch_embed_small_grid(rng):
    cfg = tiny(image_size=32, i2t=cfgmod.I2TConfig(channels=5), patch_size=4)
    assert cfg.stem_size == 8
    seq = CeiT(cfg).patch_embed(Tensor(rng.normal(size=(1, 5, 8, 8))))
    assert seq.grid_side == 2 and seq.tokens.shape == (1, 5, 8)


def test_patch_embed_matches_explicit_patch_loop(rng):
    cfg = tiny(patch_size=2)
    m = CeiT(cfg, init="random")
    feat = rng.normal(size=(2, 4, 4, 4))
    seq = m.patch_embed(Tensor(feat)).tokens.data
    W, b = m.p("embed.proj.weight").data, m.p("embed.proj.bias").data
    cls, pos = m.p("cls_token").data[0, 0], m.p("pos_embed").data[0]
    for bi in range(2):
        np.testing.assert_allclose(seq[bi, 0], cls + pos[0])
        for r in range(2):
            for c in range(2):
                patch = feat[bi, :, 2 * r : 2 * r + 2, 2 * c : 2 * c + 2].reshape(-1)
                np.testing.assert_allclose(seq[bi, 1 + r * 2 + c], patch @ W + b + pos[1 + r * 2 + c], rtol=1e-12)


def test_token_sequence_rejects_non_square():
    with pytest.raises(ShapeError):
        TokenSequence(Tensor(np.zeros((1, 6, 4))), grid_side=2)


# -- MSA / FFN / LeFF ----------------------------------------------------------------


def test_msa_matches_per_head_loop(rng):
    cfg = tiny()
    m = CeiT(cfg, init="random")
    x = rng.normal(size=(2, 5, 8))
    out = m.msa_forward(Tensor(x), "blocks.0.attn").data
    Wqkv, bqkv = m.p("blocks.0.attn.qkv.weight").data, m.p("blocks.0.attn.qkv.bias").data
    Wo, bo = m.p("blocks.0.attn.proj.weight").data, m.p("blocks.0.attn.proj.bias").data
    c, h = 8, 2
    d = c // h
    for bi in range(2):
        qkv = x[bi] @ Wqkv + bqkv
        q, k, v = qkv[:, :c], qkv[:, c : 2 * c], qkv[:, 2 * c :]
        heads = []
        for j in range(h):
            s = q[:, j * d : (j + 1) * d] @ k[:, j * d : (j + 1) * d].T / np.sqrt(d)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            heads.append(a @ v[:, j * d : (j + 1) * d])
        ref = np.concatenate(heads, axis=1) @ Wo + bo
        np.testing.assert_allclose(out[bi], ref, rtol=1e-12, atol=1e-12)


def test_msa_single_token_weight_is_one(rng):
    m = CeiT(tiny(), init="random")
    rec = ForwardRecord()
    x = rng.normal(size=(1, 1, 8))
    out = m.msa_forward(Tensor(x), "blocks.0.attn", rec)
    assert np.all(rec.block_attention[0] == 1.0)
    v = (x[0] @ m.p("blocks.0.attn.qkv.weight").data + m.p("blocks.0.attn.qkv.bias").data)[:, 16:]
    ref = v @ m.p("blocks.0.attn.proj.weight").data + m.p("blocks.0.attn.proj.bias").data
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-12)


def test_ffn_zero_weights_give_zero(rng):
    cfg = tiny(ffn_kind="baseline_ffn")
    m = CeiT(cfg, init="zeros")
    out = m.ffn_forward(Tensor(rng.normal(size=(2, 5, 8))), "blocks.0.ffn")
    np.testing.assert_array_equal(out.data, 0.0)


def test_ffn_hand_computed():
    cfg = cfgmod.ModelConfig(
        image_size=4, i2t=cfgmod.I2TConfig(enabled=False), patch_size=4, depth=1, embed_dim=2, heads=1,
        ffn_kind="baseline_ffn", expand_ratio=2, use_lca=False, num_classes=2,
    ).validate()
    m = CeiT(cfg, init="zeros")
    m.p("blocks.0.ffn.fc1.weight").data[...] = [[1.0, 0.0, -1.0, 2.0], [0.0, 1.0, 1.0, 0.0]]
    m.p("blocks.0.ffn.fc1.bias").data[...] = [0.0, 0.0, 0.5, 0.0]
    m.p("blocks.0.ffn.fc2.weight").data[...] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, -1.0]]
    m.p("blocks.0.ffn.fc2.bias").data[...] = [0.1, 0.0]
    x = np.array([[[1.0, 2.0], [0.0, -1.0]]])
    out = m.ffn_forward(Tensor(x), "blocks.0.ffn").data
    # token 0: hidden pre-act [1, 2, 1.5, 2]; token 1: [0, -1, -0.5, 0]
    g = np_gelu
    t0 = [g(1.0) + g(1.5) + 0.1, g(2.0) + g(1.5) - g(2.0)]
    t1 = [g(0.0) + g(-0.5) + 0.1, g(-1.0) + g(-0.5) - g(0.0)]
    np.testing.assert_allclose(out[0], [t0, t1], rtol=1e-14)


@pytest.mark.parametrize("use_bn", [True, False])
def test_leff_leaves_class_token_bitwise_unchanged(rng, use_bn):
    m = CeiT(tiny(leff_use_bn=use_bn), init="random").train()
    x = rng.normal(size=(3, 17, 8))
    out = m.leff_forward(Tensor(x), "blocks.0.ffn").data
    assert np.array_equal(out[:, 0], x[:, 0])
    assert not np.allclose(out[:, 1:], x[:, 1:])


def test_leff_matches_numpy_reference(rng):
    cfg = tiny(leff_use_bn=False)
    m = CeiT(cfg, init="random")
    x = rng.normal(size=(1, 17, 8))
    out = m.leff_forward(Tensor(x), "blocks.0.ffn").data
    P = {k.split("ffn.")[1]: v.data for k, v in m.params.items() if k.startswith("blocks.0.ffn.")}
    hid = np_gelu(x[0, 1:] @ P["fc1.weight"] + P["fc1.bias"])  # [16, 32]
    grid = hid.reshape(4, 4, 32)
    pad = np.pad(grid, ((1, 1), (1, 1), (0, 0)))
    conv = np.zeros_like(grid)
    for i in range(4):
        for j in range(4):
            conv[i, j] = (pad[i : i + 3, j : j + 3, :] * P["dw.weight"][:, 0].transpose(1, 2, 0)).sum((0, 1)) + P["dw.bias"]
    y = np_gelu(np_gelu(conv.reshape(16, 32)) @ P["fc2.weight"] + P["fc2.bias"])
    np.testing.assert_allclose(out[0, 1:], y, rtol=1e-11, atol=1e-12)


def test_restore_flatten_identity(rng):
    x = rng.normal(size=(2, 9, 5))
    img = spatial_restore(Tensor(x), 3)
    assert img.shape == (2, 5, 3, 3)
    np.testing.assert_array_equal(img.data[1, :, 1, 2], x[1, 1 * 3 + 2])
    np.testing.assert_array_equal(flatten_grid(img).data, x)
    with pytest.raises(ShapeError):
        spatial_restore(Tensor(x), 2)


# -- encoder block, LCA, full model ---------------------------------------------------------


@pytest.mark.parametrize("ffn_kind", ["leff", "baseline_ffn"])
def test_block_with_zero_output_projections_is_identity(rng, ffn_kind):
    m = CeiT(tiny(ffn_kind=ffn_kind), init="default").train()
    x = rng.normal(size=(2, 17, 8))
    seq = m.encoder_block_forward(TokenSequence(Tensor(x), 4), 0)
    np.testing.assert_array_equal(seq.tokens.data, x)


def test_post_norm_block_output_is_normalized(rng):
    m = CeiT(tiny(norm_order="post"), init="random").train()
    y = m.encoder_block_forward(TokenSequence(Tensor(rng.normal(size=(2, 17, 8))), 4), 0).tokens.data
    g, b = m.p("blocks.0.norm2.weight").data, m.p("blocks.0.norm2.bias").data
    z = (y - b) / g
    np.testing.assert_allclose(z.mean(-1), 0.0, atol=1e-10)


def test_token_count_preserved_through_blocks(rng):
    cfg = tiny()
    rec = ForwardRecord()
    CeiT(cfg, init="random").eval().forward(rng.normal(size=(1, 3, 16, 16)), record=rec)
    assert rec.token_counts == [17] * cfg.depth
    assert rec.class_tokens.shape == (1, cfg.depth, 8)


def test_lca_score_row_is_1_by_L(rng):
    cfg = tiny(depth=5)
    rec = ForwardRecord()
    CeiT(cfg, init="random").eval().forward(rng.normal(size=(2, 3, 16, 16)), record=rec)
    assert rec.lca_attention.shape == (2, cfg.heads, 1, 5)
    np.testing.assert_allclose(rec.lca_attention.sum(-1), 1.0)


def test_lca_identical_tokens_give_uniform_weights(rng):
    cfg = tiny(depth=4)
    m = CeiT(cfg, init="random")
    tok = rng.normal(size=(1, 1, 8))
    rec = ForwardRecord()
    trace = np.repeat(tok, 4, axis=1)
    m.lca_forward(Tensor(trace), rec)
    np.testing.assert_allclose(rec.lca_attention, 0.25, rtol=1e-14)
    # aggregated value equals the single value row
    src = np_ln(trace[0], m.p("lca.norm1.weight").data, m.p("lca.norm1.bias").data)
    v = (src @ m.p("lca.attn.kv.weight").data + m.p("lca.attn.kv.bias").data)[:, 8:]
    np.testing.assert_allclose(v.mean(0), v[0], rtol=1e-12)


def test_lca_rejects_empty_trace():
    with pytest.raises(ShapeError):
        CeiT(tiny()).lca_forward(Tensor(np.zeros((1, 0, 8))))


@pytest.mark.slow
def test_ceit_t_forward_224_logits_shape(rng):
    cfg = cfgmod.preset("ceit-t")
    cfg.dtype = "float32"
    with T.no_grad():
        logits = CeiT(cfg).eval().forward(rng.normal(size=(2, 3, 224, 224)).astype(np.float32))
    assert logits.shape == (2, 1000)
    assert np.all(np.isfinite(logits.data))


def test_forward_matches_manual_composition(rng):
    cfg = tiny(depth=1, use_lca=False)
    m = CeiT(cfg, init="random").eval()
    for s in m.stats.values():
        s.mean[...] = rng.normal(size=s.mean.shape)
        s.var[...] = rng.uniform(0.5, 2.0, size=s.var.shape)
    x = rng.normal(size=(2, 3, 16, 16))
    logits = m.forward(x).data
    seq = m.encoder_block_forward(m.patch_embed(m.i2t_forward(Tensor(x))), 0)
    cls = np_ln(seq.tokens.data[:, 0], m.p("norm.weight").data, m.p("norm.bias").data)
    ref = cls @ m.p("head.weight").data + m.p("head.bias").data
    np.testing.assert_allclose(logits, ref, rtol=1e-12, atol=1e-12)


def test_forward_is_deterministic(rng):
    cfg = tiny()
    x = rng.normal(size=(2, 3, 16, 16))
    a = CeiT(cfg, seed=3, init="random").train().forward(x).data
    b = CeiT(cfg, seed=3, init="random").train().forward(x).data
    assert np.array_equal(a, b)


def _perm_logits(cfg, x, perm):
    m = CeiT(cfg, seed=0, init="random").eval()
    return m.forward(x).data, m.forward(x, patch_perm=perm).data


def test_patch_permutation_equivariance_ffn_vs_leff(rng):
    x = rng.normal(size=(2, 3, 16, 16))
    perm = rng.permutation(16)
    a, b = _perm_logits(tiny(ffn_kind="baseline_ffn"), x, perm)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    a, b = _perm_logits(tiny(ffn_kind="leff"), x, perm)
    assert np.abs(a - b).max() > 1e-6


def test_wrong_image_size_rejected():
    with pytest.raises(ShapeError):
        CeiT(tiny()).forward(np.zeros((1, 3, 32, 32)))


def test_parameter_shape_mismatch_rejected():
    cfg = tiny()
    m = CeiT(cfg)
    params = dict(m.params)
    params["head.bias"] = Tensor(np.zeros(7))
    with pytest.raises(ShapeError, match="head.bias"):
        CeiT(cfg, params=params)


def test_every_linear_and_conv_has_bias():
    shapes = parameter_shapes(cfgmod.preset("ceit-t"))
    for name, shape in shapes.items():
        if name.endswith(".weight") and len(shape) >= 2:
            assert name.replace(".weight", ".bias") in shapes


def _np_leff(p, x, g, k):
    """LeFF on patch tokens x[N, C] (no BN) in plain numpy."""
    hid = np_gelu(x @ p["fc1.weight"] + p["fc1.bias"])
    e = hid.shape[1]
    grid = np.pad(hid.reshape(g, g, e), ((k // 2, k // 2), (k // 2, k // 2), (0, 0)))
    conv = np.zeros((g, g, e))
    for i in range(g):
        for j in range(g):
            conv[i, j] = (grid[i : i + k, j : j + k] * p["dw.weight"][:, 0].transpose(1, 2, 0)).sum((0, 1)) + p["dw.bias"]
    return np_gelu(np_gelu(conv.reshape(g * g, e)) @ p["fc2.weight"] + p["fc2.bias"])


def _np_msa(p, x, heads):
    n, c = x.shape
    d = c // heads
    qkv = x @ p["qkv.weight"] + p["qkv.bias"]
    out = np.zeros((n, c))
    for h in range(heads):
        q, k, v = (qkv[:, s * c + h * d : s * c + (h + 1) * d] for s in range(3))
        a = np.exp(q @ k.T / np.sqrt(d))
        out[:, h * d : (h + 1) * d] = (a / a.sum(1, keepdims=True)) @ v
    return out @ p["proj.weight"] + p["proj.bias"]


@pytest.mark.parametrize("norm_order", ["pre", "post"])
def test_block_matches_step_by_step_oracle(rng, norm_order):
    cfg = tiny(image_size=8, patch_size=1, leff_use_bn=False, norm_order=norm_order)
    assert cfg.num_patches == 4
    m = CeiT(cfg, init="random")
    P = {k[len("blocks.0.") :]: v.data for k, v in m.params.items() if k.startswith("blocks.0.")}
    att = {k[5:]: v for k, v in P.items() if k.startswith("attn.")}
    ffn = {k[4:]: v for k, v in P.items() if k.startswith("ffn.")}
    x = rng.normal(size=(1, 5, 8))
    out = m.encoder_block_forward(TokenSequence(Tensor(x), 2), 0).tokens.data[0]
    x0 = x[0]
    ln1 = lambda z: np_ln(z, P["norm1.weight"], P["norm1.bias"])
    ln2 = lambda z: np_ln(z, P["norm2.weight"], P["norm2.bias"])
    if norm_order == "pre":
        h = x0 + _np_msa(att, ln1(x0), 2)
        y = h.copy()
        y[1:] += _np_leff(ffn, ln2(h)[1:], 2, 3)
    else:
        h = ln1(x0 + _np_msa(att, x0, 2))
        y = h.copy()
        y[1:] += _np_leff(ffn, h[1:], 2, 3)
        y = ln2(y)
    np.testing.assert_allclose(out, y, rtol=1e-12, atol=1e-12)
