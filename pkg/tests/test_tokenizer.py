import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scqa.corpus import Corpus, Dialogue, Turn
from scqa.textnorm import strip_orthography
from scqa.tokenizer import (
    CLS,
    PAD,
    RESERVED,
    SEP,
    UNK,
    TokenizerError,
    build_vocab,
    decode,
    encode,
    load_vocab,
    save_vocab,
)


def corpus_from_text(text: str) -> Corpus:
    d = Dialogue(
        id="d", domain="Wiki", passage_text=text, turns=(Turn(1, "", ""),)
    )
    return Corpus(dialogues=(d,))


class TestBuildVocab:
    def test_frequency_order(self):
        v = build_vocab(corpus_from_text("a a a a a b b b"), min_freq=1)
        assert v.token_of[len(RESERVED)] == "a"
        assert v.token_of[len(RESERVED) + 1] == "b"

    def test_min_freq_threshold(self):
        v = build_vocab(corpus_from_text("a a a a a b b b"), min_freq=4)
        assert "a" in v.id_of and "b" not in v.id_of

    def test_lexicographic_tie_break(self):
        v = build_vocab(corpus_from_text("zebra apple"), min_freq=1)
        assert v.id_of["apple"] < v.id_of["zebra"]

    def test_max_size_cap_includes_reserved(self):
        v = build_vocab(corpus_from_text("a b c d e f"), max_size=8)
        assert len(v) == 8

    def test_empty_corpus_rejected(self):
        with pytest.raises(TokenizerError):
            build_vocab(Corpus(dialogues=()))


class TestEncodeDecode:
    def setup_method(self):
        self.vocab = build_vocab(corpus_from_text("a a b"))

    def test_direct_lookup(self):
        a, b = self.vocab.id_of["a"], self.vocab.id_of["b"]
        assert encode(self.vocab, "a b") == [a, b]

    def test_oov_maps_to_unk(self):
        assert encode(self.vocab, "zzz") == [UNK]

    def test_special_literals_pass_through(self):
        a = self.vocab.id_of["a"]
        assert encode(self.vocab, "[CLS] a [SEP]") == [CLS, a, SEP]

    def test_decode_examples(self):
        a, b = self.vocab.id_of["a"], self.vocab.id_of["b"]
        assert decode(self.vocab, [a, b]) == "a b"
        assert decode(self.vocab, []) == ""
        assert decode(self.vocab, [CLS, SEP]) == "[CLS] [SEP]"

    def test_decode_unknown_id(self):
        with pytest.raises(TokenizerError):
            decode(self.vocab, [10_000])

    def test_never_emits_pad(self):
        assert PAD not in encode(self.vocab, "a b zzz ???")

    @given(st.lists(st.sampled_from(["a", "b"]), min_size=0, max_size=10))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_equals_strip(self, words):
        text = "  ".join(words)
        assert decode(self.vocab, encode(self.vocab, text)) == strip_orthography(text)


class TestVocabFile:
    def test_round_trip(self, tmp_path):
        v = build_vocab(corpus_from_text("gamma beta beta alpha alpha alpha"))
        path = tmp_path / "vocab.txt"
        save_vocab(v, path)
        v2 = load_vocab(path)
        assert v2 == v
        assert v2.content_hash == v.content_hash

    def test_header_required(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("a\nb\n", encoding="utf-8")
        with pytest.raises(TokenizerError, match="header"):
            load_vocab(path)

    def test_line_number_maps_to_id(self, tmp_path):
        v = build_vocab(corpus_from_text("only one word here"))
        path = tmp_path / "vocab.txt"
        save_vocab(v, path)
        lines = path.read_text().splitlines()
        for offset, token in enumerate(lines[1:]):
            assert v.id_of[token] == len(RESERVED) + offset
