import random

import pytest
from hypothesis import given, strategies as st

from telesee.corpus import split_sentences
from telesee.schema import CONTROL_TOKENS
from telesee.textproc import (
    UNK, Tokenizer, Vocabulary, VocabularyError, build_vocab, decode, detokenize, encode,
    model_tokens, normalize_token_set,
)


def test_normalize_token_set():
    assert normalize_token_set("Integrated Sensing and Communication") == {
        "integrated", "sensing", "and", "communication"}
    assert normalize_token_set("") == frozenset()
    assert normalize_token_set("5G/LTE/VoLTE") == {"5g", "lte", "volte"}
    assert normalize_token_set("a, a; -- !") == {"a"}


def test_min_count_threshold(schema):
    vocab = build_vocab(["a a b"], schema, min_count=2)
    assert "a" in vocab and "b" not in vocab
    tok = Tokenizer(vocab)
    assert tok.encode("b") == [vocab.unk_id]
    assert decode(tok, encode(tok, "a b")) == ["a", UNK]


def test_specials_always_present(schema):
    vocab = build_vocab(["x"], schema)
    n = len(schema.entity_types) + len(schema.attribute_keys) + len(CONTROL_TOKENS)
    assert len(vocab.special_token_ids) == n
    assert vocab.special_token_ids == frozenset(range(n))
    assert len({vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id}) == 4


def test_build_vocab_errors(schema):
    with pytest.raises(VocabularyError):
        build_vocab([], schema)
    with pytest.raises(VocabularyError):
        build_vocab(["a"], schema, min_count=0)


def test_encode_decode_examples(vocab):
    tok = Tokenizer(vocab)
    assert encode(tok, ["attr_benefits"]) == [vocab.id("attr_benefits")]
    assert decode(tok, encode(tok, "semantic communication")) == ["semantic", "communication"]
    assert decode(tok, [vocab.pad_id]) == []
    with pytest.raises(VocabularyError):
        decode(tok, [len(vocab)])
    with pytest.raises(VocabularyError):
        Tokenizer().encode("x")


def test_round_trip_synthetic_sentences(synth_docs, vocab):
    tok = Tokenizer(vocab)
    sentences = [s for d in synth_docs for s in split_sentences(d.text)]
    for s in random.Random(0).sample(sentences, 100):
        pieces = model_tokens(s)
        assert tok.decode(tok.encode(s)) == pieces
        assert detokenize(pieces).lower() == s.lower()


def test_vocab_serialization(vocab, tmp_path):
    vocab.save(tmp_path / "v.json")
    again = Vocabulary.load(tmp_path / "v.json")
    assert again == vocab and again.digest() == vocab.digest()


@given(st.lists(st.sampled_from(["semantic", "communication", "6g", "and", ",", "-"]), max_size=12))
def test_encode_decode_identity(vocab, words):
    tok = Tokenizer(vocab)
    assert tok.decode(tok.encode(words)) == words
