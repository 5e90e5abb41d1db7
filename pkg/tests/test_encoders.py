import numpy as np
import pytest

from promptreid import autodiff as ad
from promptreid import encoders as enc
from promptreid import tokenizer as tok
from promptreid.autodiff import GradientTape, Tensor
from promptreid.errors import ConfigError, ShapeError
from promptreid.prompts import implicit_template

from gradcheck import assert_gradients_match

RNG = np.random.default_rng


def tiny_cfg(**kw):
    defaults = dict(embed_dim=8, layers=1, heads=2, patch_size=8,
                    image_size=16, context_length=12, mlp_ratio=1.5)
    defaults.update(kw)
    return enc.EncoderConfig(**defaults)


def make_vocab():
    return tok.build_vocab(
        ["a photo of a person"] * 3 + ["a woman wearing a yellow shirt and shorts"] * 2,
        600,
        n_slots=8,
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        enc.EncoderConfig(embed_dim=10, heads=4).validate()
    with pytest.raises(ConfigError):
        enc.EncoderConfig(image_size=30, patch_size=8).validate()


def test_extract_patches_layout():
    images = np.arange(2 * 4 * 4 * 1).reshape(2, 4, 4, 1).astype(float)
    patches = enc.extract_patches(images, 2)
    assert patches.shape == (2, 4, 4)
    np.testing.assert_array_equal(patches[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(patches[0, 3], [10, 11, 14, 15])


def test_image_encoder_shapes_and_determinism():
    cfg = tiny_cfg()
    encoder = enc.ImageEncoder(cfg, RNG(0))
    images = RNG(1).uniform(size=(3, 16, 16, 3))
    seq, pooled = encoder(images)
    assert seq.shape == (3, cfg.image_tokens, cfg.embed_dim)
    assert pooled.shape == (3, cfg.embed_dim)
    seq2, pooled2 = encoder(images)
    assert pooled.data.tobytes() == pooled2.data.tobytes()


def test_image_encoder_identical_images_identical_features():
    encoder = enc.ImageEncoder(tiny_cfg(), RNG(0))
    image = RNG(2).uniform(size=(16, 16, 3))
    _, pooled = encoder(np.stack([image, image]))
    np.testing.assert_array_equal(pooled.data[0], pooled.data[1])


def test_image_encoder_rejects_wrong_size():
    encoder = enc.ImageEncoder(tiny_cfg(), RNG(0))
    with pytest.raises(ShapeError):
        encoder(np.zeros((1, 8, 8, 3)))


def test_image_encoder_patch_projection_gradients():
    cfg = tiny_cfg()
    encoder = enc.ImageEncoder(cfg, RNG(3))
    images = RNG(4).uniform(size=(2, 16, 16, 3))
    probe = Tensor(RNG(5).normal(size=(2, cfg.embed_dim)))

    def loss():
        _, pooled = encoder(images)
        return ad.reduce_sum(ad.mul(pooled, probe))

    params = {
        "patch_proj.weight": encoder.patch_proj.weight,
        "patch_proj.bias": encoder.patch_proj.bias,
        "cls_token": encoder.cls_token,
    }
    assert_gradients_match(loss, params)


def test_text_encoder_eos_pooling_and_shapes():
    cfg = tiny_cfg()
    vocab = make_vocab()
    encoder = enc.TextEncoder(cfg, vocab.size, RNG(0))
    seqs = [
        tok.encode("a woman wearing shorts", vocab, cfg.context_length),
        tok.encode("a photo of a person", vocab, cfg.context_length),
    ]
    seq, pooled = enc.encode_text(encoder, seqs)
    assert seq.shape == (2, cfg.context_length, cfg.embed_dim)
    assert pooled.shape == (2, cfg.embed_dim)


def test_text_encoder_pad_region_irrelevant():
    cfg = tiny_cfg()
    vocab = make_vocab()
    encoder = enc.TextEncoder(cfg, vocab.size, RNG(0))
    seq = tok.encode("a person", vocab, cfg.context_length)
    _, pooled = enc.encode_text(encoder, [seq])
    # scribble over the PAD region: the pooled feature must not move
    ids = list(seq.ids)
    for i in range(seq.eos_position + 1, len(ids)):
        ids[i] = vocab.pad_id
    scrambled = tok.TokenSequence(ids=tuple(ids), eos_position=seq.eos_position)
    _, pooled2 = enc.encode_text(encoder, [scrambled])
    np.testing.assert_allclose(pooled.data, pooled2.data, atol=1e-12)


def test_text_encoder_distinct_prompts_distinct_features():
    cfg = tiny_cfg()
    vocab = make_vocab()
    encoder = enc.TextEncoder(cfg, vocab.size, RNG(0))
    seqs = [
        tok.encode("a woman wearing a yellow shirt", vocab, cfg.context_length),
        tok.encode("the person is wearing a hat", vocab, cfg.context_length),
    ]
    _, pooled = enc.encode_text(encoder, seqs)
    a, b = pooled.data
    cosine = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cosine < 0.999


def test_text_encoder_gradients_through_embedding():
    cfg = tiny_cfg()
    vocab = make_vocab()
    encoder = enc.TextEncoder(cfg, vocab.size, RNG(1))
    seqs = [tok.encode("a person", vocab, cfg.context_length)]
    probe = Tensor(RNG(2).normal(size=(1, cfg.embed_dim)))

    def loss():
        _, pooled = enc.encode_text(encoder, seqs)
        return ad.reduce_sum(ad.mul(pooled, probe))

    assert_gradients_match(loss, {"token_table": encoder.token_table})


def bank_setup(identity_count=3, T=2):
    cfg = tiny_cfg()
    vocab = make_vocab()
    encoder = enc.TextEncoder(cfg, vocab.size, RNG(0))
    template = implicit_template(T, vocab, cfg.context_length)
    bank = enc.ImplicitPromptBank(identity_count, template, vocab, cfg.embed_dim, RNG(7))
    return cfg, vocab, encoder, bank


def test_implicit_features_shapes():
    cfg, vocab, encoder, bank = bank_setup()
    seq, pooled = enc.encode_implicit(encoder, bank, np.array([0, 2]))
    assert pooled.shape == (2, cfg.embed_dim)
    assert seq.shape == (2, cfg.context_length, cfg.embed_dim)


def test_implicit_unknown_identity():
    _, _, encoder, bank = bank_setup(identity_count=3)
    with pytest.raises(ConfigError):
        enc.encode_implicit(encoder, bank, np.array([5]))


def test_implicit_gradients_only_reach_used_identity_rows():
    cfg, vocab, encoder, bank = bank_setup(identity_count=3, T=2)
    probe = Tensor(RNG(3).normal(size=(1, cfg.embed_dim)))
    with GradientTape() as tape:
        tape.register("rows", bank.rows)
        _, pooled = enc.encode_implicit(encoder, bank, np.array([1]))
        loss = ad.reduce_sum(ad.mul(pooled, probe))
    grads = tape.backward(loss)["rows"].data.reshape(3, bank.slot_count, -1)
    assert np.abs(grads[1]).max() > 0
    assert np.abs(grads[0]).max() == 0
    assert np.abs(grads[2]).max() == 0


def test_implicit_zeroed_bank_matches_zero_slot_embedding():
    cfg, vocab, encoder, bank = bank_setup(identity_count=2, T=2)
    bank.rows.data[...] = 0.0
    _, pooled = enc.encode_implicit(encoder, bank, np.array([0]))
    # manual construction: embed template, zero the slot positions
    ids = np.array([bank.template.ids], dtype=np.int64)
    embedded = encoder.token_table.data[ids[0]].copy()
    embedded[bank.positions] = 0.0
    mixed = Tensor(embedded[None])
    _, expected = encoder._run(mixed, ids, np.array([bank.template.eos_position]))
    np.testing.assert_allclose(pooled.data, expected.data, atol=1e-12)


def test_implicit_bank_gradcheck():
    cfg, vocab, encoder, bank = bank_setup(identity_count=2, T=2)
    probe = Tensor(RNG(4).normal(size=(2, cfg.embed_dim)))

    def loss():
        _, pooled = enc.encode_implicit(encoder, bank, np.array([0, 1]))
        return ad.reduce_sum(ad.mul(pooled, probe))

    assert_gradients_match(loss, {"rows": bank.rows, "token_table": encoder.token_table})
