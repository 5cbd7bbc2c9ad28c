import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scqa.corpus import (
    Corpus,
    Dialogue,
    ParseError,
    Turn,
    ValidationError,
    build_history_window,
    corpus_to_dict,
    load_corpus,
    resolve_answer_span,
    save_corpus,
    utterance_of,
)


def make_dialogue(n_turns=3, did="d1", passage="alpha beta gamma delta"):
    turns = tuple(
        Turn(turn_id=i, question_text=f"q{i}", answer_text=f"a{i}") for i in range(1, n_turns + 1)
    )
    return Dialogue(id=did, domain="Wiki", passage_text=passage, turns=turns)


def write_corpus_json(tmp_path, data):
    path = tmp_path / "corpus.json"
    path.write_text(json.dumps({"version": 1, "data": data}), encoding="utf-8")
    return path


def corpus_record(did="d1", n_turns=3, story="the pool was cold", domain="Wiki"):
    return {
        "id": did,
        "domain": domain,
        "story": story,
        "questions": [{"turn_id": i, "input_text": f"q{i}"} for i in range(1, n_turns + 1)],
        "answers": [
            {"turn_id": i, "input_text": "pool", "span_start": 4, "span_end": 8}
            for i in range(1, n_turns + 1)
        ],
    }


class TestLoadCorpus:
    def test_identity_ingestion(self, tmp_path):
        path = write_corpus_json(tmp_path, [corpus_record(n_turns=3)])
        corpus = load_corpus(path)
        assert len(corpus) == 1
        assert [t.turn_id for t in corpus.dialogues[0].turns] == [1, 2, 3]

    def test_duplicate_ids_rejected(self, tmp_path):
        path = write_corpus_json(tmp_path, [corpus_record("dup"), corpus_record("dup")])
        with pytest.raises(ValidationError, match="duplicate"):
            load_corpus(path)

    def test_reversed_span_rejected(self, tmp_path):
        rec = corpus_record()
        rec["answers"][0]["span_start"] = 5
        rec["answers"][0]["span_end"] = 2
        path = write_corpus_json(tmp_path, [rec])
        with pytest.raises(ValidationError, match="start >= end"):
            load_corpus(path)

    def test_malformed_json_reports_offset(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 1, "data": [}', encoding="utf-8")
        with pytest.raises(ParseError, match="byte offset"):
            load_corpus(path)

    def test_unknown_domain_rejected(self, tmp_path):
        path = write_corpus_json(tmp_path, [corpus_record(domain="Sports")])
        with pytest.raises(ValidationError, match="domain"):
            load_corpus(path)

    def test_unknown_fields_ignored(self, tmp_path):
        rec = corpus_record()
        rec["extra"] = {"anything": 1}
        rec["questions"][0]["bonus"] = True
        path = write_corpus_json(tmp_path, [rec])
        assert len(load_corpus(path)) == 1

    def test_round_trip(self, tmp_path):
        path = write_corpus_json(tmp_path, [corpus_record("a"), corpus_record("b")])
        corpus = load_corpus(path)
        out = tmp_path / "again.json"
        save_corpus(corpus, out)
        assert load_corpus(out) == corpus


class TestHistoryWindow:
    def test_two_rounds_plus_question(self):
        d = make_dialogue(3)
        hw = build_history_window(d, 3, 2)
        assert hw.parts == ("q1", "a1", "q2", "a2", "q3")
        assert hw.flattened_text == "q1 a1 q2 a2 q3"

    def test_no_history_at_first_turn(self):
        hw = build_history_window(make_dialogue(3), 1, 2)
        assert hw.flattened_text == "q1"

    def test_m_zero_disables_history(self):
        hw = build_history_window(make_dialogue(3), 3, 0)
        assert hw.flattened_text == "q3"

    def test_out_of_range_turn(self):
        with pytest.raises(IndexError):
            build_history_window(make_dialogue(3), 4, 1)

    @given(st.integers(1, 6), st.integers(0, 8))
    @settings(max_examples=60, deadline=None)
    def test_reconstruction_property(self, l, m):
        d = make_dialogue(6)
        hw = build_history_window(d, l, m)
        take = min(m, l - 1)
        expected = []
        for turn in d.turns[l - 1 - take : l - 1]:
            expected += [turn.question_text, turn.answer_text]
        expected.append(d.turns[l - 1].question_text)
        assert list(hw.parts) == expected
        # single-word texts: splitting the flat string recovers the parts
        assert hw.flattened_text.split(" ") == expected


class TestResolveAnswerSpan:
    def test_unique_substring(self):
        assert resolve_answer_span("the pool was cold", "pool") == (4, 8)

    def test_first_occurrence_wins(self):
        assert resolve_answer_span("a b a", "a") == (0, 1)

    def test_absent(self):
        assert resolve_answer_span("xyz", "pool") is None

    def test_normalization_and_mapping(self):
        span = resolve_answer_span("Well, the POOL! was cold", "pool.")
        assert span == (10, 14)

    def test_word_alignment_required(self):
        assert resolve_answer_span("poolside fun", "pool") is None

    def test_multiword_answer(self):
        passage = "it was The Pool, truly"
        span = resolve_answer_span(passage, "the pool")
        assert passage[span[0] : span[1]] == "The Pool"

    def test_deterministic_and_idempotent(self):
        for _ in range(3):
            assert resolve_answer_span("b a b a", "b a") == (0, 3)

    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_returned_slice_normalizes_to_answer(self, words):
        from scqa.textnorm import strip_orthography

        passage = " ".join(words)
        answer = words[len(words) // 2]
        span = resolve_answer_span(passage, answer)
        assert span is not None
        assert strip_orthography(passage[span[0] : span[1]]) == strip_orthography(answer)


class TestUtteranceOf:
    def test_question_then_answer(self):
        u = utterance_of(Turn(1, "who?", "Bob"))
        assert u.text == "who? Bob"

    def test_empty_question_degenerates(self):
        assert utterance_of(Turn(1, "", "Bob")).text == "Bob"

    def test_order_preserved_across_turns(self):
        d = make_dialogue(2)
        u1, u2 = (utterance_of(t) for t in d.turns)
        assert (u1.turn_id, u2.turn_id) == (1, 2)
        assert u1.text != u2.text


class TestInvariants:
    def test_turn_ids_must_be_consecutive(self):
        with pytest.raises(ValidationError, match="consecutive"):
            Dialogue(
                id="x",
                domain="Wiki",
                passage_text="p",
                turns=(Turn(1, "q", "a"), Turn(3, "q", "a")),
            )

    def test_span_must_cover_answer(self):
        with pytest.raises(ValidationError, match="does not contain"):
            Dialogue(
                id="x",
                domain="Wiki",
                passage_text="alpha beta",
                turns=(Turn(1, "q", "gamma", span=(0, 5)),),
            )

    def test_empty_dialogue_rejected(self):
        with pytest.raises(ValidationError, match="no turns"):
            Dialogue(id="x", domain="Wiki", passage_text="p", turns=())

    def test_corpus_dict_shape(self):
        doc = corpus_to_dict(Corpus(dialogues=(make_dialogue(2),)))
        assert doc["version"] == 1
        assert set(doc["data"][0]) == {"id", "domain", "story", "questions", "answers"}
