import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptreid import tokenizer as tok
from promptreid.errors import ConfigError, ParseError

WORDS = [
    "a", "person", "woman", "man", "wearing", "yellow", "red", "blue",
    "shirt", "t-shirt", "shorts", "jeans", "hat", "tie", "watch", "photo",
    "with", "and", "no", "long", "short", "hair", "sleeves", "shoes",
]


def small_vocab(n_slots=4, target=600):
    corpus = [" ".join(WORDS), "a woman wearing a yellow shirt and shorts"]
    return tok.build_vocab(corpus, target, n_slots=n_slots)


def test_two_character_corpus_first_merge():
    vocab = tok.build_vocab(["aa aa"], 520, n_slots=0)
    assert vocab.merges[0] == ("a", "a" + tok.EOW)


def test_target_below_minimum_is_an_error():
    with pytest.raises(ConfigError):
        tok.build_vocab(["aa"], 300, n_slots=0)


def test_empty_corpus_is_an_error():
    with pytest.raises(ConfigError):
        tok.build_vocab([], 600)


def test_vocab_is_deterministic():
    corpus = ["the person wears a red hat", "the person wears a blue hat"]
    v1 = tok.build_vocab(corpus, 600, n_slots=2)
    v2 = tok.build_vocab(corpus, 600, n_slots=2)
    assert v1.merges == v2.merges
    assert v1.tokens == v2.tokens
    assert v1.to_json() == v2.to_json()


def test_vocab_size_never_exceeds_target():
    vocab = small_vocab(target=530)
    assert vocab.size <= 530


def test_reserved_ids_dense_and_distinct():
    vocab = small_vocab(n_slots=3)
    assert vocab.pad_id == 0 and vocab.sos_id == 1 and vocab.eos_id == 2
    assert list(vocab.slot_ids) == [3, 4, 5]
    assert len(set(vocab.tokens)) == len(vocab.tokens)


def test_encode_empty_sentence():
    vocab = small_vocab()
    seq = tok.encode("", vocab, 8)
    assert seq.ids[0] == vocab.sos_id
    assert seq.ids[1] == vocab.eos_id
    assert seq.eos_position == 1
    assert all(t == vocab.pad_id for t in seq.ids[2:])


def test_encode_truncates_and_keeps_eos():
    vocab = small_vocab()
    long_sentence = " ".join(["zq"] * 200)
    seq = tok.encode(long_sentence, vocab, 77)
    assert len(seq.ids) == 77
    assert seq.eos_position == 76
    assert seq.ids[76] == vocab.eos_id
    assert vocab.pad_id not in seq.ids


def test_context_length_minimum():
    vocab = small_vocab()
    with pytest.raises(ConfigError):
        tok.encode("hi", vocab, 2)


def test_roundtrip_template_sentences():
    vocab = small_vocab()
    sentences = [
        "a woman wearing a yellow shirt and shorts",
        "the person is wearing a hat",
        "A   Person   With   Long Hair",
        "a man wearing jeans, black shoes and no tie.",
    ]
    for s in sentences:
        seq = tok.encode(s, vocab, 64)
        assert tok.decode(seq, vocab) == tok.normalize(s)


@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=10))
@settings(max_examples=100, deadline=None)
def test_roundtrip_random_template_sentences(words):
    vocab = small_vocab()
    sentence = " ".join(words)
    seq = tok.encode(sentence, vocab, 64)
    assert tok.decode(seq, vocab) == tok.normalize(sentence)
    tok.validate_sequence(seq, vocab, 64)


@given(st.text(min_size=0, max_size=40))
@settings(max_examples=100, deadline=None)
def test_encode_never_fails_and_sequences_are_valid(text):
    vocab = small_vocab()
    seq = tok.encode(text, vocab, 32)
    tok.validate_sequence(seq, vocab, 32)


def test_unknown_characters_fall_back_to_bytes():
    vocab = small_vocab()
    seq = tok.encode("naïve café ☕", vocab, 64)
    assert tok.decode(seq, vocab) == "naïve café ☕"


def test_slot_tokens_never_produced_by_encoding():
    vocab = small_vocab(n_slots=4)
    slot_ids = set(vocab.slot_ids)
    for s in ["a photo of a person", "<slot0>", "slot0", "a <slot1> person"]:
        seq = tok.encode(s, vocab, 64)
        assert not slot_ids.intersection(seq.ids)


def test_vocab_json_roundtrip():
    vocab = small_vocab()
    clone = tok.Vocabulary.from_json(vocab.to_json())
    assert clone == vocab
    assert clone.merge_ranks == vocab.merge_ranks


def test_vocab_json_rejects_malformed():
    with pytest.raises(ParseError):
        tok.Vocabulary.from_json(json.dumps({"tokens": ["a"]}))


def test_fits_context():
    vocab = small_vocab()
    assert tok.fits_context("a man", vocab, 16)
    assert not tok.fits_context(" ".join(["zq"] * 50), vocab, 16)
