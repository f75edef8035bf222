import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcad.codec import AutoencoderConfig, CodecDescriptor, decode, encode, fit_autoencoder, psnr
from rcad.data import stack_images


def test_identity_codec():
    x = np.random.default_rng(0).random((8, 8, 3))
    c = CodecDescriptor(factor=1, latent_channels=3)
    assert np.array_equal(encode(x, c), x)
    assert np.array_equal(decode(x, c), x)


def test_constant_image_gives_constant_latent():
    z = encode(np.full((64, 64, 3), 0.5), CodecDescriptor(factor=4))
    assert z.shape == (16, 16, 4) and np.all(z == 0.5)


def test_desk_shape_f8():
    assert encode(np.zeros((64, 64, 3)), CodecDescriptor(factor=8, latent_channels=4)).shape == (8, 8, 4)


def test_block_constant_round_trip():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16, 3)).repeat(4, 0).repeat(4, 1)
    c = CodecDescriptor(factor=4, latent_channels=3)
    assert np.allclose(decode(encode(x, c), c), x, atol=1e-12)
    # channel replication to 4 latent channels averages back exactly
    c4 = CodecDescriptor(factor=4, latent_channels=4)
    assert np.allclose(decode(encode(x, c4), c4), x, atol=1e-12)


def test_mask_replicated_to_image_channels():
    m = np.zeros((64, 64), float)
    m[16:48, 16:48] = 1
    z = encode(m[..., None], CodecDescriptor())
    assert z.shape == (16, 16, 4)
    assert np.all(z[..., 0] == z[..., 1]) and z[4:12, 4:12].min() == 1.0


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        encode(np.zeros((30, 32, 3)), CodecDescriptor(factor=4))
    with pytest.raises(ValueError):
        decode(np.zeros((8, 8, 3)), CodecDescriptor(latent_channels=4))
    with pytest.raises(ValueError):
        CodecDescriptor(factor=3)
    with pytest.raises(ValueError):
        CodecDescriptor(kind="trained_ae")


def test_decode_clamps():
    out = decode(np.full((4, 4, 4), 3.0), CodecDescriptor())
    assert out.max() == 1.0


@settings(max_examples=40)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_shape_contract(f, hb, wb, c_lat):
    c = CodecDescriptor(factor=f, latent_channels=c_lat)
    x = np.random.default_rng(0).random((hb * f, wb * f, 3))
    assert encode(x, c).shape == (hb, wb, c_lat)
    assert decode(encode(x, c), c).shape == x.shape


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_resize_codec_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    c = CodecDescriptor(factor=4, latent_channels=5)
    assert np.allclose(encode(a * x + b * y, c), a * encode(x, c) + b * encode(y, c), atol=1e-12)


def test_fit_autoencoder_validation():
    with pytest.raises(ValueError):
        fit_autoencoder(np.zeros((4, 16, 16, 3)))


def test_fit_autoencoder_constant_corpus_and_determinism():
    x = np.full((32, 16, 16, 3), 0.4, np.float32)
    cfg = AutoencoderConfig(steps=800, width=8)
    a, b = fit_autoencoder(x, cfg), fit_autoencoder(x, cfg)
    assert a.weights_ref == b.weights_ref
    assert psnr(decode(encode(x, a), a), x) > 40


@pytest.mark.slow
def test_fit_autoencoder_reaches_25db(small_bench):
    images = np.concatenate([stack_images(v) for v in small_bench.train.values()])
    codec = fit_autoencoder(images)
    assert psnr(decode(encode(images, codec), codec), images) >= 25
