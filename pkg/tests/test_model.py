import numpy as np
import pytest

from cse.errors import ConfigurationError, RejectedInputError
from cse.model import (
    DecoderConfig,
    DecoderMode,
    EmbedderConfig,
    decode,
    embed,
    init_decoder,
    init_embedder,
)
from cse.numerics import ConvParams, derive_rng, grad_check, pointwise_conv, relu
from cse.training import trainable_parameters

from conftest import SMALL_SHAPES, small_models, small_pairs, total_loss_fn


def test_init_embedder_deterministic():
    a, b = init_embedder(EmbedderConfig(), 3), init_embedder(EmbedderConfig(), 3)
    assert a.digest() == b.digest()
    assert a.digest() != init_embedder(EmbedderConfig(), 4).digest()


def test_parameter_count_from_config():
    cfg = EmbedderConfig()
    plan = [520, 256, 128, 64]
    expected = sum(o * i + o for i, o in zip(plan[:-1], plan[1:])) + 2 * (256 + 128)
    assert cfg.num_parameters() == expected
    emb = init_embedder(cfg)
    assert sum(v.size for v in emb.trainable_tensors().values()) == expected


def test_default_embedding_shape():
    emb = init_embedder(EmbedderConfig(), 0)
    x = derive_rng(0).normal(size=(2, 520, 14, 14)).astype(np.float32)
    out = embed(emb, x, "eval")
    assert out.shape == (2, 64, 7, 7)


def test_embed_eval_is_pure():
    emb = init_embedder(EmbedderConfig(16, (8,), 4), 0)
    before = emb.digest()
    x = derive_rng(1).normal(size=(3, 16, 4, 4))
    np.testing.assert_array_equal(embed(emb, x, "eval"), embed(emb, x, "eval"))
    assert emb.digest() == before
    embed(emb, x, "train")
    assert emb.digest() != before  # running statistics move in train mode only


def test_embed_rejects_wrong_channels():
    with pytest.raises(RejectedInputError):
        embed(init_embedder(EmbedderConfig(16, (8,), 4)), np.zeros((1, 15, 4, 4)))


def test_conv_relu_positive_homogeneity():
    rng = derive_rng(2)
    p = ConvParams(rng.normal(size=(4, 3, 1, 1)), np.zeros(4))
    x = rng.normal(size=(1, 3, 4, 4))
    np.testing.assert_allclose(relu(pointwise_conv(2 * x, p)), 2 * relu(pointwise_conv(x, p)), atol=1e-12)


def test_decoder_shapes_and_zero_embedding():
    dec = init_decoder(DecoderConfig())
    out = decode(dec, np.zeros((1, 64, 7, 7), np.float32))
    assert [o.shape[1:] for o in out] == [(136, 14, 14), (384, 7, 7)]
    for o, (c1, c2) in zip(out, dec.heads):
        expect = c2.weight[:, :, 0, 0] @ np.maximum(c1.bias, 0) + c2.bias
        np.testing.assert_allclose(o[0], np.broadcast_to(expect[:, None, None], o.shape[1:]), atol=1e-5)


def test_decoder_deterministic_and_frozen():
    a = init_decoder(DecoderConfig(seed=5))
    b = init_decoder(DecoderConfig(seed=5))
    assert a.digest() == b.digest()
    assert not a.trainable and a.trainable_tensors() == {}
    e = derive_rng(3).normal(size=(1, 64, 7, 7)).astype(np.float32)
    for x, y in zip(decode(a, e), decode(a, e)):
        np.testing.assert_array_equal(x, y)


def test_trainable_set_follows_mode():
    for mode in DecoderMode:
        prior = init_decoder(DecoderConfig(SMALL_SHAPES, 4, 8)) if mode is DecoderMode.TRAINED_BEFORE else None
        emb = init_embedder(EmbedderConfig(16, (8,), 4))
        dec = init_decoder(DecoderConfig(SMALL_SHAPES, 4, 8, mode), prior)
        names = set(trainable_parameters(emb, dec))
        has_decoder = any(n.startswith("decoder.") for n in names)
        assert has_decoder == (mode is DecoderMode.TRAINED_TOGETHER)
        assert {n for n in names if n.startswith("embedder.")} == {f"embedder.{k}" for k in emb.trainable_tensors()}


def test_trained_before_requires_prior():
    with pytest.raises(ConfigurationError):
        init_decoder(DecoderConfig(mode=DecoderMode.TRAINED_BEFORE))
    prior = init_decoder(DecoderConfig(SMALL_SHAPES, 4, 8, DecoderMode.TRAINED_TOGETHER, seed=9))
    dec = init_decoder(DecoderConfig(SMALL_SHAPES, 4, 8, DecoderMode.TRAINED_BEFORE), prior)
    assert dec.digest() == prior.digest() and not dec.trainable


@pytest.mark.parametrize("mode", [DecoderMode.RANDOM_FROZEN, DecoderMode.TRAINED_TOGETHER])
def test_total_loss_gradient_matches_finite_differences(mode):
    emb, dec = small_models(1, mode)
    params = trainable_parameters(emb, dec)
    pf = small_pairs(derive_rng(2), n=2)
    assert grad_check(total_loss_fn(emb, dec), params, pf, epsilon=1e-6) < 1e-3


def test_frozen_decoder_excluded_from_check_set():
    emb, dec = small_models(0, DecoderMode.RANDOM_FROZEN)
    params = trainable_parameters(emb, dec)
    assert len(params) == len(emb.trainable_tensors())
    assert sum(v.size for v in params.values()) == emb.config.num_parameters()
