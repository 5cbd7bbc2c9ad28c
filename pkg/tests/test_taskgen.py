"""Generator tests. The reconstruction/deletion oracles work purely from the
emitted example (token slices, marker positions, label) plus the source
corpus, never from the generator's internal window/slot choices."""

import json

import numpy as np
import pytest

from scqa.corpus import Dialogue, Turn, utterance_of
from scqa.seeding import derived_rng
from scqa.taskgen import (
    GenConfig,
    GenerationError,
    build_incoherence_example,
    build_insertion_example,
    build_qa_input,
    build_question_prediction_example,
    candidate_slices,
    example_from_dict,
    example_to_dict,
    gen_incoherence,
    gen_insertion,
    gen_question_prediction,
    generate_dataset,
    qa_passage_region,
    read_examples,
    validate_example,
    write_examples,
)
from scqa.tokenizer import CLS, INC, INS, SEP, build_vocab, decode, encode


def tiny_dialogue(n_turns=4, did="d1", passage="bob ran home fast today"):
    turns = tuple(
        Turn(turn_id=i, question_text=f"q{i}", answer_text=f"a{i}")
        for i in range(1, n_turns + 1)
    )
    return Dialogue(id=did, domain="Wiki", passage_text=passage, turns=turns)


# ---------------------------------------------------------------------------
# example slicing helpers (shared by the oracles)
# ---------------------------------------------------------------------------

def slice_incoherence(example):
    """(survivor token lists, target tokens) recovered from the example alone."""
    ids = list(example.token_ids)
    markers = list(example.marker_positions)
    first_sep = ids.index(SEP)
    survivors = [
        ids[markers[j] + 1 : markers[j + 1]] for j in range(len(markers) - 1)
    ]
    assert markers[-1] == first_sep - 1, "terminal marker must sit before [SEP]"
    target = ids[first_sep + 1 : len(ids) - 1]
    return survivors, target


def slice_insertion(example):
    ids = list(example.token_ids)
    markers = list(example.marker_positions)
    bounds = markers + [len(ids) - 1]  # final [SEP]
    return [ids[bounds[j] + 1 : bounds[j + 1]] for j in range(len(markers))]


def encoded_utterances(dialogue, vocab):
    return [encode(vocab, utterance_of(t).text) for t in dialogue.turns]


def windows(seq, k):
    return [seq[i : i + k] for i in range(len(seq) - k + 1)]


# ---------------------------------------------------------------------------
# QA assembly
# ---------------------------------------------------------------------------

class TestBuildQaInput:
    def test_single_turn_layout(self):
        d = tiny_dialogue(passage="bob ran home")
        d = Dialogue(
            id="d",
            domain="Wiki",
            passage_text="bob ran home",
            turns=(Turn(1, "who ran", "bob"),),
        )
        vocab = build_vocab_from([d])
        ex = build_qa_input(d, 1, GenConfig(k=2, m=0, max_len=32), vocab)
        assert decode(vocab, list(ex.token_ids)) == "[CLS] who ran [SEP] bob ran home [SEP]"
        s, e = ex.label
        assert decode(vocab, list(ex.token_ids[s : e + 1])) == "bob"
        assert ex.segment_ids == (0, 0, 0, 0, 1, 1, 1, 1)

    def test_history_precedes_question(self):
        d = Dialogue(
            id="d",
            domain="Wiki",
            passage_text="bob ran home",
            turns=(
                Turn(1, "who ran", "bob"),
                Turn(2, "where to", "home"),
                Turn(3, "how fast", "ran"),
            ),
        )
        vocab = build_vocab_from([d])
        ex = build_qa_input(d, 3, GenConfig(k=2, m=2, max_len=64), vocab)
        text = decode(vocab, list(ex.token_ids))
        assert text.startswith("[CLS] who ran bob where to home how fast [SEP]")

    def test_truncated_gold_span_dropped(self):
        d = Dialogue(
            id="d",
            domain="Wiki",
            passage_text="one two three four five six seven eight nine answer",
            turns=(Turn(1, "find it", "answer"),),
        )
        vocab = build_vocab_from([d])
        # room for the passage: max_len - len([CLS] find it [SEP]) - 1 = 5 tokens
        assert build_qa_input(d, 1, GenConfig(k=2, m=0, max_len=10), vocab) is None

    def test_unresolvable_span_skips(self):
        d = Dialogue(
            id="d", domain="Wiki", passage_text="alpha beta",
            turns=(Turn(1, "q", "missing"),),
        )
        vocab = build_vocab_from([d])
        assert build_qa_input(d, 1, GenConfig(k=2, m=0, max_len=32), vocab) is None
        ex = build_qa_input(d, 1, GenConfig(k=2, m=0, max_len=32), vocab, require_span=False)
        assert ex is not None and ex.label is None

    def test_question_too_long_raises(self):
        d = Dialogue(
            id="d", domain="Wiki", passage_text="alpha",
            turns=(Turn(1, "w x y z v u t s", "alpha"),),
        )
        vocab = build_vocab_from([d])
        with pytest.raises(GenerationError, match="question alone"):
            build_qa_input(d, 1, GenConfig(k=2, m=0, max_len=8), vocab)


def build_vocab_from(dialogues):
    from scqa.corpus import Corpus

    return build_vocab(Corpus(dialogues=tuple(dialogues)))


# ---------------------------------------------------------------------------
# INC
# ---------------------------------------------------------------------------

class TestIncoherence:
    def test_paper_layout_k4_t2(self):
        d = tiny_dialogue(4)
        vocab = build_vocab_from([d])
        window = encoded_utterances(d, vocab)
        ex = build_incoherence_example(window, t=2, dialogue_id=d.id, seed_used=0, max_len=64)
        expect = (
            "[CLS] [INC] q1 a1 [INC] q3 a3 [INC] q4 a4 [INC] [SEP] q2 a2 [SEP]"
        )
        assert decode(vocab, list(ex.token_ids)) == expect
        assert ex.label == (0, 1, 0, 0)
        assert len(ex.marker_positions) == 4

    def test_smallest_window_k2_t1(self):
        d = tiny_dialogue(2)
        vocab = build_vocab_from([d])
        window = encoded_utterances(d, vocab)
        ex = build_incoherence_example(window, t=1, dialogue_id=d.id, seed_used=0, max_len=64)
        assert decode(vocab, list(ex.token_ids)) == "[CLS] [INC] q2 a2 [INC] [SEP] q1 a1 [SEP]"
        assert ex.label == (1, 0)

    def test_single_turn_dialogue_rejected(self, small_vocab):
        d = tiny_dialogue(1)
        with pytest.raises(GenerationError):
            gen_incoherence(d, GenConfig(k=4), derived_rng(0), small_vocab)

    def test_reconstruction_oracle_1000_seeds(self, small_corpus, small_vocab, desk_gen_config):
        utts = {d.id: encoded_utterances(d, small_vocab) for d in small_corpus.dialogues}
        for i in range(1000):
            d = small_corpus.dialogues[i % len(small_corpus.dialogues)]
            ex = gen_incoherence(d, desk_gen_config, derived_rng("inc", i), small_vocab)
            validate_example(ex, desk_gen_config)
            survivors, target = slice_incoherence(ex)
            slot = ex.label_index
            rebuilt = survivors[:slot] + [target] + survivors[slot:]
            k = len(ex.marker_positions)
            assert rebuilt in windows(utts[d.id], k), f"seed {i}: reconstruction failed"


# ---------------------------------------------------------------------------
# INS
# ---------------------------------------------------------------------------

class TestInsertion:
    def test_paper_layout_insert_middle(self):
        d = tiny_dialogue(2)
        vocab = build_vocab_from([d, tiny_dialogue(1, did="donor", passage="x y")])
        window = encoded_utterances(d, vocab)
        donor = encode(vocab, "qx ax")
        ex = build_insertion_example(
            window, donor, position=2, dialogue_id=d.id, seed_used=0, max_len=64
        )
        expect = "[CLS] [INS] q1 a1 [INS] [UNK] [UNK] [INS] q2 a2 [SEP]"
        assert decode(vocab, list(ex.token_ids)) == expect
        assert ex.label == (0, 1, 0)

    def test_insert_first_position(self):
        d = tiny_dialogue(2)
        vocab = build_vocab_from([d])
        window = encoded_utterances(d, vocab)
        ex = build_insertion_example(window, [5], 1, d.id, 0, 64)
        assert ex.token_ids[2] == 5  # donor right after the first marker
        assert ex.label_index == 0

    def test_same_dialogue_donor_rejected(self, small_corpus, small_vocab):
        d = small_corpus.dialogues[0]
        with pytest.raises(GenerationError, match="donor"):
            gen_insertion(d, d, GenConfig(k=3), derived_rng(0), small_vocab)

    def test_empty_donor_rejected(self, small_corpus, small_vocab):
        d = small_corpus.dialogues[0]
        empty = Dialogue.__new__(Dialogue)
        object.__setattr__(empty, "id", "empty")
        object.__setattr__(empty, "domain", "Wiki")
        object.__setattr__(empty, "passage_text", "p")
        object.__setattr__(empty, "turns", ())
        with pytest.raises(GenerationError, match="no turns"):
            gen_insertion(d, empty, GenConfig(k=3), derived_rng(0), small_vocab)

    def test_deletion_oracle_1000_seeds(self, small_corpus, small_vocab, desk_gen_config):
        utts = {d.id: encoded_utterances(d, small_vocab) for d in small_corpus.dialogues}
        dialogues = small_corpus.dialogues
        for i in range(1000):
            d = dialogues[i % len(dialogues)]
            rng = derived_rng("ins", i)
            donor = dialogues[(i + 1 + int(rng.integers(0, len(dialogues) - 1))) % len(dialogues)]
            if donor.id == d.id:
                donor = dialogues[(dialogues.index(d) + 1) % len(dialogues)]
            ex = gen_insertion(d, donor, desk_gen_config, rng, small_vocab)
            validate_example(ex, desk_gen_config)
            merged = slice_insertion(ex)
            slot = ex.label_index
            remaining = merged[:slot] + merged[slot + 1 :]
            assert remaining in windows(utts[d.id], len(remaining)), f"seed {i}"
            assert merged[slot] in utts[donor.id], f"seed {i}: donor utterance mismatch"


# ---------------------------------------------------------------------------
# QUE
# ---------------------------------------------------------------------------

class TestQuestionPrediction:
    def question_pool(self, corpus):
        return [(d.id, t.question_text) for d in corpus.dialogues for t in d.turns]

    def test_empty_context_boundary(self, small_corpus, small_vocab):
        d = small_corpus.dialogues[0]
        cfg = GenConfig(k=2, m=2, max_len=128)
        ex = gen_question_prediction(
            d, 1, cfg, derived_rng(3), self.question_pool(small_corpus), small_vocab
        )
        spans = candidate_slices(ex)
        assert len(spans) == 2
        for start, stop in spans:
            assert ex.token_ids[start] == CLS
            # empty context: [CLS] question [SEP] passage [SEP]
            seg = ex.segment_ids[start:stop]
            first_sep = ex.token_ids[start:stop].index(SEP)
            assert all(s == 0 for s in seg[: first_sep + 1])
            assert all(s == 1 for s in seg[first_sep + 1 :])

    def test_k9_has_nine_candidates(self, small_corpus, small_vocab, desk_gen_config):
        d = small_corpus.dialogues[1]
        ex = gen_question_prediction(
            d, 5, desk_gen_config, derived_rng(4), self.question_pool(small_corpus), small_vocab
        )
        assert len(candidate_slices(ex)) == 9
        assert isinstance(ex.label, int) and 0 <= ex.label < 9

    def test_true_question_at_label(self, small_corpus, small_vocab, desk_gen_config):
        d = small_corpus.dialogues[2]
        l = 4
        ex = gen_question_prediction(
            d, l, desk_gen_config, derived_rng(5), self.question_pool(small_corpus), small_vocab
        )
        start, stop = candidate_slices(ex)[ex.label]
        cand = list(ex.token_ids[start:stop])
        question = encode(small_vocab, d.turns[l - 1].question_text)
        ctx = encode(
            small_vocab, " ".join(utterance_of(t).text for t in d.turns[: l - 1])
        )
        head = [CLS] + ctx + question + [SEP]
        assert cand[: len(head)] == head

    def test_pool_too_small(self, small_corpus, small_vocab):
        d = small_corpus.dialogues[0]
        pool = self.question_pool(small_corpus)[:3]
        with pytest.raises(GenerationError, match="k-1"):
            gen_question_prediction(d, 1, GenConfig(k=9), derived_rng(0), pool, small_vocab)

    def test_label_position_uniform_chi_square(self, small_corpus, small_vocab, desk_gen_config):
        from scipy.stats import chisquare

        pool = self.question_pool(small_corpus)
        counts = np.zeros(9, dtype=int)
        dialogues = small_corpus.dialogues
        for i in range(9000):
            d = dialogues[i % len(dialogues)]
            rng = derived_rng("que-uniform", i)
            l = int(rng.integers(1, len(d.turns) + 1))
            ex = gen_question_prediction(d, l, desk_gen_config, rng, pool, small_vocab)
            counts[ex.label] += 1
        assert chisquare(counts).pvalue > 0.01


# ---------------------------------------------------------------------------
# dataset driver
# ---------------------------------------------------------------------------

class TestGenerateDataset:
    def test_single_task_mix(self, small_corpus, small_vocab, desk_gen_config):
        examples, skips = generate_dataset(
            small_corpus, desk_gen_config, {"QA": 0, "INC": 10, "INS": 0, "QUE": 0}, small_vocab
        )
        assert len(examples) == 10
        assert all(ex.task == "INC" for ex in examples)
        assert skips == {}

    def test_byte_identical_output(self, tmp_path, small_corpus, small_vocab, desk_gen_config):
        mix = {"QA": 12, "INC": 6, "INS": 6, "QUE": 6}
        blobs = []
        for run in range(2):
            examples, skips = generate_dataset(small_corpus, desk_gen_config, mix, small_vocab)
            path = tmp_path / f"run{run}.jsonl"
            write_examples(path, examples, desk_gen_config, mix, skips)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_degenerate_corpus_skips(self, small_vocab):
        from scqa.corpus import Corpus

        d = tiny_dialogue(1, passage="alpha beta gamma")
        corpus = Corpus(dialogues=(d,))
        examples, skips = generate_dataset(
            corpus, GenConfig(k=4, m=0, max_len=64), {"INC": 5}, small_vocab
        )
        assert examples == []
        assert skips == {"INC:generation_error": 5}

    def test_all_generated_examples_valid(self, small_corpus, small_vocab, desk_gen_config):
        mix = {"QA": 30, "INC": 12, "INS": 12, "QUE": 12}
        examples, _ = generate_dataset(small_corpus, desk_gen_config, mix, small_vocab)
        for ex in examples:
            validate_example(ex, desk_gen_config)

    def test_negative_count_rejected(self, small_corpus, small_vocab, desk_gen_config):
        with pytest.raises(ValueError):
            generate_dataset(small_corpus, desk_gen_config, {"QA": -1}, small_vocab)

    def test_jsonl_round_trip(self, tmp_path, small_corpus, small_vocab, desk_gen_config):
        mix = {"QA": 5, "INC": 3, "INS": 3, "QUE": 3}
        examples, skips = generate_dataset(small_corpus, desk_gen_config, mix, small_vocab)
        path = tmp_path / "tasks.jsonl"
        manifest_path = write_examples(path, examples, desk_gen_config, mix, skips)
        assert read_examples(path) == examples
        manifest = json.loads(manifest_path.read_text())
        assert manifest["examples"] == len(examples)
        assert manifest["config"]["k"] == desk_gen_config.k

    def test_round_trip_through_dicts(self, small_corpus, small_vocab, desk_gen_config):
        examples, _ = generate_dataset(
            small_corpus, desk_gen_config, {"QA": 2, "INC": 2, "INS": 2, "QUE": 2}, small_vocab
        )
        for ex in examples:
            assert example_from_dict(json.loads(json.dumps(example_to_dict(ex)))) == ex


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

class TestTruncation:
    def test_markers_survive_tight_budget(self):
        long_turns = tuple(
            Turn(turn_id=i, question_text="w " * 20, answer_text="v " * 20)
            for i in range(1, 5)
        )
        d = Dialogue(id="long", domain="Wiki", passage_text="p", turns=long_turns)
        vocab = build_vocab_from([d])
        window = encoded_utterances(d, vocab)
        cfg_len = 40
        ex = build_incoherence_example(window, 2, d.id, 0, cfg_len)
        assert len(ex.token_ids) <= cfg_len
        assert len(ex.marker_positions) == 4
        assert list(ex.token_ids).count(SEP) == 2
        survivors, target = slice_incoherence(ex)
        assert all(len(s) >= 1 for s in survivors)
        assert len(target) >= 1

    def test_budget_too_small_raises(self):
        window = [[9, 9, 9] for _ in range(4)]
        with pytest.raises(GenerationError):
            build_incoherence_example(window, 1, "d", 0, 8)

    def test_insertion_trims_longest_first(self):
        window = [[7] * 30, [8] * 2]
        ex = build_insertion_example(window, [9] * 2, 1, "d", 0, 24)
        utts = slice_insertion(ex)
        assert len(ex.token_ids) <= 24
        assert [u[:1] for u in utts] == [[9], [7], [8]]
        assert len(utts[1]) < 30  # the long one got trimmed
        assert len(utts[0]) == 2 and len(utts[2]) == 2

    def test_que_candidate_respects_max_len(self, small_corpus, small_vocab):
        cfg = GenConfig(k=3, m=2, max_len=48)
        pool = [(d.id, t.question_text) for d in small_corpus.dialogues for t in d.turns]
        d = small_corpus.dialogues[0]
        ex = gen_question_prediction(d, len(d.turns), cfg, derived_rng(8), pool, small_vocab)
        for start, stop in candidate_slices(ex):
            assert stop - start <= 48
