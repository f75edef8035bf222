import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import disc_mask
from rcad.codec import CodecDescriptor
from rcad.diffusion import make_schedule, weights_checksum
from rcad.errors import ContainerError, NonConvergence
from rcad.memory import (
    ClassMemory,
    CompressConfig,
    SemanticEmbedding,
    SpatialMapper,
    build_semantic_condition,
    compress_class,
    init_semantic_embedding,
    load_memory,
    make_prompt,
    make_spatial_mapper,
    memory_footprint,
    memory_to_bytes,
    memory_from_bytes,
    save_memory,
    spatial_encode,
)


def test_init_semantic_embedding_shapes_and_seed():
    assert init_semantic_embedding(20, 768, 0).v.shape == (20, 768)
    a, b = init_semantic_embedding(8, 64, 3), init_semantic_embedding(8, 64, 3)
    assert a.v.shape == (8, 64) and np.array_equal(a.v, b.v)
    big = init_semantic_embedding(64, 512, 1).v
    assert abs(big.std() - 0.02) < 0.001 and abs(big.mean()) < 0.001
    with pytest.raises(ValueError):
        init_semantic_embedding(0, 64, 0)
    with pytest.raises(ValueError):
        SemanticEmbedding(np.full((2, 4), np.nan))


def test_build_semantic_condition_layout():
    prompt = make_prompt(4, 64, 0)
    c = build_semantic_condition(prompt, init_semantic_embedding(8, 64, 0))
    assert c.tokens.shape == (12, 64) and (c.prompt_len, c.semantic_len, c.spatial_len) == (4, 8, 0)
    assert np.array_equal(c.tokens[:4], prompt.tokens)
    assert np.array_equal(make_prompt(4, 64, 0).tokens, prompt.tokens)
    with pytest.raises(ValueError):
        build_semantic_condition(prompt, init_semantic_embedding(8, 32, 0))


def test_spatial_encode_paper_scale_token_count():
    # 256x256 mask, f=8, c_lat=4, (n, m) = (128, 200), C = 1280
    codec = CodecDescriptor(factor=8, latent_channels=4)
    mapper = make_spatial_mapper(128, 200, 1280, 32 * 32 * 4, seed=0)
    assert mapper.reshape_in == (32, 128) and mapper.tokens == 5
    out = spatial_encode(disc_mask(side=256, r=60, cy=128, cx=128), codec, mapper)
    assert out.shape == (5, 1280)


def test_spatial_encode_desk_shapes():
    # f=8: 8*8*4 = 256 = 8*32 and 8*64 = 512 = 8*64
    f8 = make_spatial_mapper(32, 64, 64, 8 * 8 * 4, seed=0)
    assert f8.reshape_in == (8, 32) and f8.tokens == 8
    assert spatial_encode(disc_mask(), CodecDescriptor(factor=8), f8).shape == (8, 64)
    # f=4 (the codec default): 16*16*4 = 1024 = 32*32 and 32*64 = 2048 = 32*64
    f4 = make_spatial_mapper(32, 64, 64, 16 * 16 * 4, seed=0)
    assert f4.tokens == 32
    assert spatial_encode(disc_mask(), CodecDescriptor(), f4).shape == (32, 64)


def test_zero_mask_zero_bias_gives_zero_tokens():
    m = make_spatial_mapper(32, 64, 64, 1024, seed=0)
    m = SpatialMapper(m.weight, np.zeros(64, np.float32), 1024, 64)
    assert not spatial_encode(np.zeros((64, 64)), CodecDescriptor(), m).any()


def test_spatial_encode_oracle():
    codec = CodecDescriptor()
    m = make_spatial_mapper(32, 64, 64, 1024, seed=2)
    mask = disc_mask(r=13, cy=30, cx=35)
    # block-average the mask to 16x16, replicate over 4 channels, flatten row-major
    lat = mask.reshape(16, 4, 16, 4).mean((1, 3))
    flat = np.repeat(lat[..., None], 4, axis=-1).reshape(32, 32)
    expected = (flat @ m.weight.astype(np.float64) + m.bias).reshape(32, 64)
    assert np.allclose(spatial_encode(mask, codec, m), expected, atol=1e-5)


def test_mapper_divisibility_raises():
    with pytest.raises(ValueError):
        make_spatial_mapper(30, 64, 64, 1024, seed=0)
    with pytest.raises(ValueError):
        make_spatial_mapper(32, 63, 64, 1024, seed=0)  # 32*63 = 2016 is not a multiple of 64


@settings(max_examples=60)
@given(st.sampled_from([8, 16, 32, 64]), st.sampled_from([8, 16, 32, 64, 100]), st.sampled_from([8, 16, 64, 128]),
       st.sampled_from([(4, 4), (8, 4), (16, 4), (8, 3)]))
def test_mapper_shape_identities(n, m, C, lat):
    side, c_lat = lat
    elements = side * side * c_lat
    if elements % n or ((elements // n) * m) % C:
        with pytest.raises(ValueError):
            make_spatial_mapper(n, m, C, elements, seed=0)
        return
    mp = make_spatial_mapper(n, m, C, elements, seed=0)
    R, S = mp.reshape_in[0], mp.tokens
    assert R * n == elements and R * m == S * C


def test_class_memory_mask_count_bounds(tiny_memory):
    with pytest.raises(ValueError):
        ClassMemory(0, tiny_memory.v, None, np.zeros((11, 64, 64), bool), 0, 4, CodecDescriptor())
    with pytest.raises(ValueError):
        ClassMemory(0, None, None, np.zeros((1, 64, 64), bool), 0, 4, CodecDescriptor())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_memory_round_trip_bit_identical(tiny_memory, tmp_path):
    path = tmp_path / "m.rcm"
    size = save_memory(tiny_memory, path)
    assert size == path.stat().st_size == memory_footprint(tiny_memory)["total"]
    back = load_memory(path)
    assert memory_to_bytes(back) == memory_to_bytes(tiny_memory)
    assert np.array_equal(back.v.v, tiny_memory.v.v)
    assert np.array_equal(back.mapper.weight, tiny_memory.mapper.weight)
    assert np.array_equal(back.stored_masks, tiny_memory.stored_masks)


def test_footprint_block_arithmetic(tiny_memory):
    fp = memory_footprint(tiny_memory)
    assert fp["v"] == 8 * 64 * 4
    assert fp["W"] == (32 * 64 + 64) * 4
    assert fp["masks"] == 12 + 8 * math.ceil(64 * 64 / 8)
    assert fp["total"] == len(memory_to_bytes(tiny_memory))
    assert fp["total"] < 100 * 1024


@pytest.mark.parametrize("cut", [10, 60, -1])
def test_truncated_memory_names_block(tiny_memory, cut):
    data = memory_to_bytes(tiny_memory)
    with pytest.raises(ContainerError) as exc:
        memory_from_bytes(data[:cut])
    assert exc.value.block is not None


def test_corrupt_block_named(tiny_memory):
    data = bytearray(memory_to_bytes(tiny_memory))
    blob = bytes(data)
    start = blob.index(tiny_memory.v.v.astype("<f4").tobytes()[:16])
    data[start] ^= 0xFF
    with pytest.raises(ContainerError) as exc:
        memory_from_bytes(bytes(data))
    assert exc.value.block == "v"


def test_wrong_version_rejected(tiny_memory):
    data = bytearray(memory_to_bytes(tiny_memory))
    data[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(ContainerError):
        memory_from_bytes(bytes(data))


# ---------------------------------------------------------------------------
# compression
# ---------------------------------------------------------------------------


def _class_data(small_bench, k=0):
    samples = small_bench.train[k]
    return np.stack([s.image for s in samples]), np.stack([s.object_mask for s in samples])


def _cfg(**kw):
    base = dict(steps=6, batch=4, probe_size=8, min_improvement=0.0, n_mask=8)
    base.update(kw)
    return CompressConfig(**base)


def test_compress_is_deterministic_and_frozen(small_bench, tiny_denoiser, codec, schedule):
    images, masks = _class_data(small_bench)
    before = weights_checksum(tiny_denoiser)
    a = compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(), class_id=0)
    b = compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(), class_id=0)
    assert weights_checksum(tiny_denoiser) == before
    assert memory_to_bytes(a) == memory_to_bytes(b)
    assert a.mode == "both" and a.v.v.shape == (8, 64) and a.mapper.tokens == 32
    idx = a.meta["stored_mask_indices"]
    assert len(set(idx)) == 8
    assert all(np.array_equal(a.stored_masks[j], masks[i]) for j, i in enumerate(idx))


def test_compress_only_touches_embedding_and_mapper(small_bench, tiny_denoiser, codec, schedule):
    images, masks = _class_data(small_bench)
    mem = compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(steps=3), class_id=0)
    init_v = init_semantic_embedding(8, 64, 0).v
    init_w = make_spatial_mapper(32, 64, 64, 1024, 0).weight
    assert not np.array_equal(mem.v.v, init_v)
    assert not np.array_equal(mem.mapper.weight, init_w)


def test_compress_semantic_only_and_spatial_only(small_bench, tiny_denoiser, codec, schedule):
    images, masks = _class_data(small_bench)
    sem = compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(use_spatial=False), class_id=0)
    assert sem.mode == "semantic_only" and sem.mapper is None
    sp = compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(use_semantic=False), class_id=0)
    assert sp.mode == "spatial_only" and sp.v is None
    assert memory_to_bytes(load_memory_roundtrip(sp)) == memory_to_bytes(sp)
    with pytest.raises(ValueError):
        compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(use_semantic=False, use_spatial=False))


def load_memory_roundtrip(mem):
    return memory_from_bytes(memory_to_bytes(mem))


def test_compress_nonconvergence(small_bench, tiny_denoiser, codec, schedule):
    images, masks = _class_data(small_bench)
    with pytest.raises(NonConvergence):
        compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(steps=0, min_improvement=0.3))


def test_compress_preconditions(small_bench, tiny_denoiser, codec, schedule):
    images, masks = _class_data(small_bench)
    with pytest.raises(ValueError):
        compress_class(images[:7], masks[:7], tiny_denoiser, codec, schedule, _cfg())
    with pytest.raises(ValueError):
        compress_class(images, masks[:-1], tiny_denoiser, codec, schedule, _cfg())
    with pytest.raises(ValueError):
        compress_class(images, masks, tiny_denoiser, codec, schedule, _cfg(optimizer="rmsprop"))


def test_compress_restores_requires_grad(small_bench, codec, schedule):
    from rcad.diffusion import Denoiser, DenoiserConfig

    torch.manual_seed(0)
    den = Denoiser(DenoiserConfig(widths=(8, 8, 8), cond_dim=64, time_dim=16, attn_dim=16, heads=2))
    images, masks = _class_data(small_bench)
    compress_class(images, masks, den, codec, make_schedule(50), _cfg(steps=2))
    assert all(p.requires_grad for p in den.parameters())
