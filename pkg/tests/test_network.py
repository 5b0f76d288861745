from __future__ import annotations

import pytest
import torch

from flowshape.services.errors import ConfigurationError, RejectedInputError
from flowshape.services.network import (
    CAPTURE,
    INJECT_FULL,
    AdapterInput,
    AttentionHook,
    KVCache,
    ModelConfig,
    adapter_input_from_image,
    apply_guidance,
    attention_with_kv,
    blend_kv,
    build_model,
)


def _kv(seed: int, tokens: int = 64, heads: int = 2, dim: int = 8):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(tokens, heads, dim, generator=g), torch.randn(tokens, heads, dim, generator=g)


def test_blend_fixed_points_are_bitwise():
    k_tgt, v_tgt = _kv(0)
    k_inv, v_inv = _kv(1)
    ones, zeros = torch.ones(8, 8), torch.zeros(8, 8)
    k, v = blend_kv(ones, k_tgt, v_tgt, k_inv, v_inv)
    assert torch.equal(k, k_tgt) and torch.equal(v, v_tgt)
    k, v = blend_kv(zeros, k_tgt, v_tgt, k_inv, v_inv)
    assert torch.equal(k, k_inv) and torch.equal(v, v_inv)


def test_blend_is_per_token_convex():
    k_tgt, v_tgt = _kv(0)
    k_inv, v_inv = _kv(1)
    mask = torch.zeros(8, 8)
    mask[2, 3] = 0.25
    k, _ = blend_kv(mask, k_tgt, v_tgt, k_inv, v_inv)
    token = 2 * 8 + 3
    assert torch.allclose(k[token], 0.25 * k_tgt[token] + 0.75 * k_inv[token])
    assert torch.equal(k[0], k_inv[0])


def test_blend_rejects_wrong_mask_size():
    k, v = _kv(0)
    with pytest.raises(RejectedInputError):
        blend_kv(torch.ones(4, 4), k, v, k, v)


def test_attention_matches_dense_softmax():
    q = torch.tensor([[[[1.0, 0.0]]]])                        # (B=1, T=1, heads=1, d=2)
    k = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])             # (S=2, heads, d)
    v = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]])
    out = attention_with_kv(q, k, v)
    scores = torch.tensor([1.0, 0.0]) / 2 ** 0.5
    w = torch.exp(scores) / torch.exp(scores).sum()
    expected = w[0] * v[0, 0] + w[1] * v[1, 0]
    assert torch.allclose(out[0, 0, 0], expected, atol=1e-6)


def test_attention_rejects_head_mismatch():
    q = torch.zeros(1, 4, 2, 8)
    k = torch.zeros(4, 3, 8)
    with pytest.raises(RejectedInputError):
        attention_with_kv(q, k, k)


def test_same_seed_builds_identical_models(tiny_config):
    a, b = build_model(tiny_config, 7), build_model(tiny_config, 7)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_fresh_adapter_adds_nothing(fresh_model, latent):
    edge = torch.rand(8, 8)
    plain = fresh_model(latent[None], 0.5, 3)
    with_adapter = fresh_model(latent[None], 0.5, 3, adapter=AdapterInput(edge, (2.5, 3.5)))
    assert torch.equal(plain, with_adapter)


def test_self_injection_through_zero_mask_equals_passthrough(fresh_model, latent):
    x = latent[None]
    plain, captured = fresh_model.evaluate(x, 0.4, 2, hooks={1: CAPTURE})
    blended, _ = fresh_model.evaluate(
        x, 0.4, 2, hooks={1: AttentionHook.blended(torch.zeros(8, 8))}, external_kv=captured
    )
    assert torch.equal(plain, blended)


def test_self_injection_full_matches_passthrough(fresh_model, latent):
    x = latent[None]
    plain, captured = fresh_model.evaluate(x, 0.4, 2, hooks={1: CAPTURE})
    injected, _ = fresh_model.evaluate(x, 0.4, 2, hooks={1: INJECT_FULL}, external_kv=captured)
    assert torch.allclose(plain, injected, atol=1e-6)


def test_ones_mask_ignores_external_kv(fresh_model, latent):
    x = latent[None]
    plain = fresh_model(x, 0.4, 2)
    k, v = _kv(9, heads=fresh_model.config.heads, dim=fresh_model.config.head_dim)
    out = fresh_model(x, 0.4, 2, hooks={1: AttentionHook.blended(torch.ones(8, 8))}, external_kv={1: (k, v)})
    assert torch.equal(plain, out)


def test_injection_without_external_kv_is_a_config_error(fresh_model, latent):
    with pytest.raises(ConfigurationError):
        fresh_model(latent[None], 0.4, 2, hooks={1: INJECT_FULL})


def test_blend_mask_must_match_grid(fresh_model, latent):
    k, v = _kv(0)
    with pytest.raises(RejectedInputError):
        fresh_model(latent[None], 0.4, 2, hooks={1: AttentionHook.blended(torch.ones(4, 4))}, external_kv={1: (k, v)})


def test_rejects_wrong_latent_shape(fresh_model):
    with pytest.raises(RejectedInputError):
        fresh_model(torch.zeros(1, 4, 4, 192), 0.5, 0)


def test_kv_cache_is_write_once():
    cache = KVCache()
    kv = _kv(0)
    cache.record(0, 1, kv)
    with pytest.raises(ConfigurationError):
        cache.record(0, 1, kv)
    assert cache.is_complete(1, (1,))
    assert not cache.is_complete(2, (1,))
    assert set(cache.slice(0)) == {1}


def test_guidance_scale_one_returns_conditional():
    cond, uncond = torch.ones(3), torch.zeros(3)
    assert torch.equal(apply_guidance(cond, uncond, 1.0), cond)
    assert torch.equal(apply_guidance(cond, uncond, 2.0), torch.full((3,), 2.0))


def test_constant_image_has_no_edges():
    assert torch.equal(adapter_input_from_image(torch.full((3, 64, 64), 0.4)), torch.zeros(8, 8))


def test_edge_map_is_normalized_and_located():
    image = torch.zeros(3, 64, 64)
    image[0, :, 32:] = 1.0
    edge = adapter_input_from_image(image)
    assert edge.max().item() == pytest.approx(1.0)
    assert edge[:, 3:5].min() > 0
    assert torch.equal(edge[:, :3], torch.zeros(8, 3))


def test_model_config_rejects_out_of_range_injection_block():
    with pytest.raises(ConfigurationError):
        ModelConfig(blocks=2, injection_blocks=(4,))


def test_kv_cache_keys_by_any_hashable_slot():
    cache = KVCache()
    cache.record(("mid", 2), 1, _kv(0))
    assert cache.is_complete([("mid", 2)], (1,))
    assert set(cache.slice(("mid", 2))) == {1}
    assert cache.slice(2) == {}
