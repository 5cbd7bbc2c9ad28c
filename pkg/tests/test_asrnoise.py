import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scqa.asrnoise import (
    NoiseConfig,
    corrupt,
    corrupt_corpus,
    load_confusion_table,
    measure_wer,
    strip_orthography,
)
from scqa.synthetic import make_synthetic


def brute_force_wer(reference: str, hypothesis: str) -> float:
    """Plain O(nm) dynamic program, kept independent of the numpy version."""
    ref, hyp = reference.split(), hypothesis.split()
    d = [[0] * (len(hyp) + 1) for _ in range(len(ref) + 1)]
    for i in range(len(ref) + 1):
        d[i][0] = i
    for j in range(len(hyp) + 1):
        d[0][j] = j
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[-1][-1] / len(ref)


class TestStripOrthography:
    def test_definition(self):
        assert strip_orthography("Poor, indeed!") == "poor indeed"

    def test_fixed_point(self):
        assert strip_orthography("already lower") == "already lower"

    def test_whitespace_collapse(self):
        assert strip_orthography("A  B\tC") == "a b c"


class TestMeasureWer:
    def test_identity(self):
        assert measure_wer("a b c", "a b c") == 0.0

    def test_single_substitution(self):
        # hand-checked DP table: one substitution among three words
        assert measure_wer("a b c", "a x c") == pytest.approx(1 / 3)

    def test_total_deletion(self):
        assert measure_wer("a b", "") == 1.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            measure_wer("   ", "a")

    @given(
        st.lists(st.sampled_from("abcd"), min_size=1, max_size=9),
        st.lists(st.sampled_from("abcd"), min_size=0, max_size=9),
    )
    @settings(max_examples=120, deadline=None)
    def test_matches_brute_force(self, ref, hyp):
        r, h = " ".join(ref), " ".join(hyp)
        assert measure_wer(r, h) == pytest.approx(brute_force_wer(r, h))

    def test_whitespace_normalization_invariance(self):
        assert measure_wer("a  b\tc", "a b c") == 0.0


class TestCorrupt:
    def test_confusion_table_preferred(self):
        cfg = NoiseConfig(
            target_wer=1.0, sub_weight=1.0, del_weight=0.0, ins_weight=0.0,
            seed=1, confusion_table={"poor": ("pool",)},
        )
        assert corrupt("poor", cfg) == "pool"

    def test_zero_wer_is_strip_only(self):
        cfg = NoiseConfig(target_wer=0.0, seed=9)
        assert corrupt("Hello, World!", cfg) == "hello world"

    def test_deterministic(self):
        cfg = NoiseConfig(target_wer=0.5, seed=42, vocab=("u", "v", "w", "xy"))
        text = "one two three four five six"
        assert corrupt(text, cfg) == corrupt(text, cfg)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            NoiseConfig(sub_weight=0.5, del_weight=0.5, ins_weight=0.5)

    def test_target_wer_hit_on_long_text(self):
        rng = np.random.Generator(np.random.PCG64(0))
        vocab = [f"w{i:03d}" for i in range(300)]
        words = [vocab[int(i)] for i in rng.integers(0, 300, size=10_000)]
        text = " ".join(words)
        cfg = NoiseConfig(target_wer=0.187, seed=7)
        wer = measure_wer(strip_orthography(text), corrupt(text, cfg))
        assert 0.167 <= wer <= 0.207

    def test_monotone_expected_wer(self):
        rng = np.random.Generator(np.random.PCG64(1))
        vocab = [f"w{i:02d}" for i in range(80)]
        text = " ".join(vocab[int(i)] for i in rng.integers(0, 80, size=1000))
        ref = strip_orthography(text)
        means = []
        for target in (0.0, 0.1, 0.2, 0.4):
            vals = [
                measure_wer(ref, corrupt(text, NoiseConfig(target_wer=target, seed=s)))
                for s in range(100)
            ]
            means.append(float(np.mean(vals)))
        assert means == sorted(means)
        assert means[0] == 0.0


class TestCorruptCorpus:
    def test_answers_stay_clean_and_spans_reresolve(self):
        corpus = make_synthetic(n_dialogues=4, n_turns=4, seed=0)
        noisy = corrupt_corpus(corpus, NoiseConfig(target_wer=0.3, seed=5))
        for clean_d, noisy_d in zip(corpus.dialogues, noisy.dialogues):
            for ct, nt in zip(clean_d.turns, noisy_d.turns):
                assert nt.answer_text == ct.answer_text
                if nt.span is not None:
                    lo, hi = nt.span
                    assert nt.answer_text in noisy_d.passage_text[lo:hi]

    def test_question_switch(self):
        corpus = make_synthetic(n_dialogues=3, n_turns=3, seed=0)
        noisy = corrupt_corpus(
            corpus, NoiseConfig(target_wer=1.0, seed=5), corrupt_passages=False
        )
        for clean_d, noisy_d in zip(corpus.dialogues, noisy.dialogues):
            assert noisy_d.passage_text == clean_d.passage_text
            assert any(
                nt.question_text != strip_orthography(ct.question_text)
                for ct, nt in zip(clean_d.turns, noisy_d.turns)
            )

    def test_deterministic_across_calls(self):
        corpus = make_synthetic(n_dialogues=3, n_turns=3, seed=0)
        cfg = NoiseConfig(target_wer=0.4, seed=11)
        assert corrupt_corpus(corpus, cfg) == corrupt_corpus(corpus, cfg)


def test_confusion_table_parsing(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("poor\tpool,pore\n# comment\nsea\tsee\n", encoding="utf-8")
    table = load_confusion_table(path)
    assert table == {"poor": ("pool", "pore"), "sea": ("see",)}
