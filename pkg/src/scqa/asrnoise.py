"""WER-controlled text corruption standing in for an ASR front end.

Transcription noise is simulated, not recognized: orthography is stripped
(no casing, no punctuation) and each word is independently corrupted with
probability target_wer, split between substitutions, deletions, and
insertions. Every random choice is keyed on (seed, word index), so output
depends only on the text and the config.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import Corpus, Dialogue, Turn, resolve_answer_span
from .seeding import stable_hash, unit_float
from .textnorm import strip_orthography

__all__ = [
    "NoiseConfig",
    "strip_orthography",
    "corrupt",
    "corrupt_corpus",
    "measure_wer",
    "load_confusion_table",
]


@dataclass(frozen=True)
class NoiseConfig:
    target_wer: float = 0.187
    sub_weight: float = 0.7
    del_weight: float = 0.15
    ins_weight: float = 0.15
    seed: int = 0
    confusion_table: Optional[Mapping[str, tuple[str, ...]]] = None
    vocab: Optional[tuple[str, ...]] = None  # replacement pool; text's own words if None

    def __post_init__(self):
        total = self.sub_weight + self.del_weight + self.ins_weight
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {total}, expected 1")
        if min(self.sub_weight, self.del_weight, self.ins_weight) < 0:
            raise ValueError("mixture weights must be non-negative")
        if not 0.0 <= self.target_wer <= 1.0:
            raise ValueError(f"target_wer must be in [0,1], got {self.target_wer}")


def load_confusion_table(path: str | Path) -> dict[str, tuple[str, ...]]:
    """TSV rows `word<TAB>replacement[,replacement...]`."""
    table: dict[str, tuple[str, ...]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        word, _, repls = line.partition("\t")
        table[word.strip()] = tuple(r.strip() for r in repls.split(",") if r.strip())
    return table


def _pick(options: Sequence[str], seed: int, *key: object) -> str:
    return options[stable_hash(seed, *key) % len(options)]


def _substitute(word: str, cfg: NoiseConfig, pool: Sequence[str], i: int) -> str:
    if cfg.confusion_table and cfg.confusion_table.get(word):
        return _pick(cfg.confusion_table[word], cfg.seed, "sub", i)
    same_len = [w for w in pool if len(w) == len(word) and w != word]
    candidates = same_len or [w for w in pool if w != word]
    if not candidates:
        return word
    return _pick(candidates, cfg.seed, "sub", i)


def corrupt(text: str, cfg: NoiseConfig) -> str:
    """Strip orthography, then corrupt each word independently at target_wer."""
    words = strip_orthography(text).split()
    pool: Sequence[str] = cfg.vocab if cfg.vocab else sorted(set(words))
    out: list[str] = []
    for i, word in enumerate(words):
        if unit_float(cfg.seed, "hit", i) >= cfg.target_wer:
            out.append(word)
            continue
        r = unit_float(cfg.seed, "op", i)
        if r < cfg.sub_weight:
            out.append(_substitute(word, cfg, pool, i))
        elif r < cfg.sub_weight + cfg.del_weight:
            pass
        else:
            out.append(word)
            if pool:
                out.append(_pick(pool, cfg.seed, "ins", i))
    return " ".join(out)


def corrupt_corpus(
    corpus: Corpus,
    cfg: NoiseConfig,
    corrupt_passages: bool = True,
    corrupt_questions: bool = True,
) -> Corpus:
    """Corrupt passages and/or questions; answers stay clean, spans re-resolved.

    Each text gets its own seed derived from (cfg.seed, dialogue id, field),
    so noise is uncorrelated across dialogues but reproducible.
    """
    if cfg.vocab is None:
        words = set()
        for d in corpus.dialogues:
            words.update(strip_orthography(d.passage_text).split())
            for t in d.turns:
                words.update(strip_orthography(t.question_text).split())
        cfg = replace(cfg, vocab=tuple(sorted(words)))
    dialogues = []
    for d in corpus.dialogues:
        passage = d.passage_text
        if corrupt_passages:
            passage = corrupt(
                passage, replace(cfg, seed=stable_hash(cfg.seed, d.id, "passage"))
            )
        turns = []
        for t in d.turns:
            question = t.question_text
            if corrupt_questions:
                question = corrupt(
                    question,
                    replace(cfg, seed=stable_hash(cfg.seed, d.id, "q", t.turn_id)),
                )
            turns.append(
                Turn(
                    turn_id=t.turn_id,
                    question_text=question,
                    answer_text=t.answer_text,
                    span=resolve_answer_span(passage, t.answer_text) if passage else None,
                )
            )
        dialogues.append(
            Dialogue(id=d.id, domain=d.domain, passage_text=passage, turns=tuple(turns))
        )
    return Corpus(dialogues=tuple(dialogues), split=corpus.split)


def measure_wer(reference: str, hypothesis: str) -> float:
    """Word-level Levenshtein distance (unit costs) over reference word count."""
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref:
        raise ValueError("reference is empty after tokenization")
    if not hyp:
        return 1.0
    # Integer-code the words so row updates vectorize.
    codes = {w: i for i, w in enumerate(Counter(ref + hyp))}
    ref_c = np.array([codes[w] for w in ref])
    hyp_c = np.array([codes[w] for w in hyp])
    m = len(hyp_c)
    offsets = np.arange(m + 1)
    prev = offsets.astype(np.int64)
    for i, rc in enumerate(ref_c, start=1):
        cost = (hyp_c != rc).astype(np.int64)
        tentative = np.minimum(prev[1:] + 1, prev[:-1] + cost)
        row = np.concatenate(([i], tentative))
        # Left-to-right d[j] = min(t[j], d[j-1]+1) is a min-plus prefix scan.
        row = np.minimum.accumulate(row - offsets) + offsets
        prev = row
    return float(prev[-1]) / len(ref)
