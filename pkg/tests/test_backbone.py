from __future__ import annotations

import math
from dataclasses import fields, replace

import numpy as np
import pytest

from tcpa_vit import formats
from tcpa_vit.backbone import (
    BackboneParams,
    BlockParams,
    ModelConfig,
    TokenState,
    block_forward,
    classify,
    dense_attention_hook,
    encode,
    init_params,
    load_weights,
    multi_head_attention,
    patch_embed,
    save_weights,
)
from tcpa_vit.numerics import DimensionError, Tensor

SMALL = ModelConfig(image_h=4, image_w=4, channels=2, patch_h=2, patch_w=2,
                    embed_dim=8, num_layers=2, num_heads=2, ffn_dim=16)


def arrays_equal(p: BackboneParams, q: BackboneParams) -> bool:
    a, b = p.to_arrays(), q.to_arrays()
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_config_derived_counts():
    assert SMALL.num_patches == 4
    assert ModelConfig().num_patches == 64
    assert ModelConfig().head_dim == 16


@pytest.mark.parametrize("kw", [dict(image_h=30), dict(embed_dim=63), dict(num_layers=0)])
def test_config_rejects_bad_extents(kw):
    with pytest.raises(ValueError):
        replace(ModelConfig(), **kw)


def test_patch_embed_counts_tokens():
    params = init_params(SMALL, 0)
    state = patch_embed(np.zeros((4, 4, 2)), params)
    assert state.tokens.shape == (1, 5, 8)
    assert state.layer_index == 1


def test_zero_image_zero_bias_zero_pos_gives_zero_patches():
    params = init_params(SMALL, 0)
    params.pos = np.zeros_like(params.pos)
    state = patch_embed(np.zeros((4, 4, 2)), params)
    assert np.all(state.patches.data == 0)
    np.testing.assert_array_equal(state.cls.data[0], params.cls)


def test_patch_embed_matches_hand_indexed_oracle():
    cfg = ModelConfig(image_h=6, image_w=4, channels=3, patch_h=3, patch_w=2,
                      embed_dim=4, num_layers=1, num_heads=1, ffn_dim=4)
    params = init_params(cfg, 3)
    params.embed_b = np.random.default_rng(1).standard_normal(4)
    img = np.random.default_rng(0).random((6, 4, 3))
    out = patch_embed(img, params).tokens.data[0]
    gw = cfg.image_w // cfg.patch_w
    for n in range(cfg.num_patches):
        r0, c0 = (n // gw) * cfg.patch_h, (n % gw) * cfg.patch_w
        flat = [img[r0 + i, c0 + j, c] for i in range(cfg.patch_h) for j in range(cfg.patch_w) for c in range(3)]
        expect = [sum(flat[k] * params.embed_w[k, d] for k in range(len(flat))) + params.embed_b[d] + params.pos[n + 1, d]
                  for d in range(4)]
        np.testing.assert_allclose(out[n + 1], expect, atol=1e-14)
    np.testing.assert_allclose(out[0], params.cls + params.pos[0], atol=0)


def test_patch_embed_extent_mismatch():
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((5, 4, 2)), init_params(SMALL, 0))


def _zero_ffn(block: BlockParams) -> BlockParams:
    return replace(block, w1=np.zeros_like(block.w1), w2=np.zeros_like(block.w2), b2=np.zeros_like(block.b2))


def test_identity_hook_and_zero_ffn_is_pure_residual():
    params = init_params(SMALL, 0)
    state = patch_embed(np.random.default_rng(0).random((2, 4, 4, 2)), params)
    zero_hook = lambda normed, raw, block, j: Tensor(np.zeros(normed.shape))
    out = block_forward(state, _zero_ffn(params.blocks[0]), zero_hook)
    np.testing.assert_array_equal(out.tokens.data, state.tokens.data)
    assert out.layer_index == 2


def test_hook_receives_normalized_tokens():
    params = init_params(SMALL, 0)
    state = patch_embed(np.random.default_rng(0).random((4, 4, 2)), params)
    seen = {}

    def hook(normed, raw, block, j):
        seen["normed"], seen["raw"], seen["j"] = normed.data, raw.data, j
        return Tensor(np.zeros(normed.shape))

    block_forward(state, params.blocks[0], hook)
    np.testing.assert_allclose(seen["normed"].mean(-1), 0, atol=1e-12)
    np.testing.assert_array_equal(seen["raw"], state.tokens.data)
    assert seen["j"] == 1


def test_single_head_attention_two_tokens_by_hand():
    d = 2
    eye = np.eye(d)
    block = BlockParams(np.ones(d), np.zeros(d), eye, np.zeros(d), eye, np.zeros(d), eye, np.zeros(d),
                        eye, np.zeros(d), np.ones(d), np.zeros(d), np.zeros((d, 1)), np.zeros(1),
                        np.zeros((1, d)), np.zeros(d))
    x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    out, attn, _ = multi_head_attention(Tensor(x), block, num_heads=1)
    s = 1 / math.sqrt(2)
    # token 0: logits (1*s, 0); token 1: logits (0, 4*s)
    a0 = [math.exp(s) / (math.exp(s) + 1), 1 / (math.exp(s) + 1)]
    a1 = [1 / (1 + math.exp(4 * s)), math.exp(4 * s) / (1 + math.exp(4 * s))]
    np.testing.assert_allclose(attn[0, 0], [a0, a1], atol=1e-15)
    np.testing.assert_allclose(out.data[0], [[a0[0], 2 * a0[1]], [a1[0], 2 * a1[1]]], atol=1e-15)


def test_block_preserves_token_count_for_any_hook():
    params = init_params(SMALL, 0)
    state = patch_embed(np.random.default_rng(0).random((3, 4, 4, 2)), params)
    out = block_forward(state, params.blocks[0], dense_attention_hook(2))
    assert out.tokens.shape == state.tokens.shape
    bad = lambda normed, raw, block, j: normed[:, 1:, :]
    with pytest.raises(DimensionError):
        block_forward(state, params.blocks[0], bad)


def test_classify_zero_identity_and_matmul_oracle():
    f = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert np.all(classify(f, Tensor(np.zeros((4, 2))), Tensor(np.zeros(2))).data == 0)
    np.testing.assert_array_equal(classify(f, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, f.data)
    w, b = np.random.default_rng(1).standard_normal((4, 2)), np.array([0.5, -1.0])
    expect = [[sum(f.data[i, k] * w[k, j] for k in range(4)) + b[j] for j in range(2)] for i in range(3)]
    np.testing.assert_allclose(classify(f, Tensor(w), Tensor(b)).data, expect, atol=1e-14)
    with pytest.raises(DimensionError):
        classify(f, Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))


def test_init_is_deterministic_and_seed_sensitive():
    assert arrays_equal(init_params(SMALL, 5), init_params(SMALL, 5))
    assert not arrays_equal(init_params(SMALL, 5), init_params(SMALL, 6))


def test_init_statistics():
    cfg = ModelConfig(embed_dim=100, ffn_dim=100, num_layers=1, num_heads=4)
    w = init_params(cfg, 0).blocks[0].wq.reshape(-1)
    assert w.size == 10_000
    # truncated at two standard deviations, std 0.02 before truncation
    assert abs(w.mean()) < 3 * 0.02 / math.sqrt(w.size)
    assert np.all(np.abs(w) <= 0.04)
    p = init_params(cfg, 0)
    assert np.all(p.blocks[0].ln1_g == 1) and np.all(p.blocks[0].bq == 0)


def test_full_forward_is_deterministic():
    params = init_params(SMALL, 1)
    img = np.random.default_rng(0).random((2, 4, 4, 2))
    a = encode(img, params, lambda j: dense_attention_hook(2)).tokens.data
    b = encode(img, params, lambda j: dense_attention_hook(2)).tokens.data
    assert a.tobytes() == b.tobytes()


def test_weights_round_trip(tmp_path):
    params = init_params(SMALL, 2)
    save_weights(params, tmp_path / "w.tcpw")
    back = load_weights(tmp_path / "w.tcpw")
    assert back.config == SMALL
    assert arrays_equal(params, back)


def test_corrupted_magic(tmp_path):
    path = tmp_path / "w.tcpw"
    save_weights(init_params(SMALL, 2), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(formats.MagicError):
        load_weights(path)


def test_truncated_file_names_array(tmp_path):
    path = tmp_path / "w.tcpw"
    save_weights(init_params(SMALL, 2), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(formats.TruncationError, match="blocks.1.b2"):
        load_weights(path)


def test_shape_table_inconsistency(tmp_path):
    arrays = init_params(SMALL, 2).to_arrays()
    arrays["blocks.0.wq"] = np.zeros((8, 7))
    formats.save_arrays(arrays, tmp_path / "w.tcpw")
    with pytest.raises(formats.ShapeTableError, match="blocks.0.wq"):
        load_weights(tmp_path / "w.tcpw")


def test_block_params_cover_expected_shapes():
    assert [f.name for f in fields(BlockParams)] == list(BlockParams.expected_shapes(SMALL))


def test_token_state_views():
    t = Tensor(np.arange(30.0).reshape(1, 5, 6))
    s = TokenState(t)
    assert s.cls.shape == (1, 6) and s.patches.shape == (1, 4, 6) and s.num_patches == 4
