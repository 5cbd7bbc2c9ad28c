"""Dialogue QA corpora: data model, JSON ingestion, history windowing, span resolution.

A corpus is a set of dialogues, each a passage plus an ordered sequence of
question/answer turns. The JSON layout mirrors CoQA: per dialogue, parallel
`questions` and `answers` lists keyed by 1-based `turn_id`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .textnorm import strip_orthography, tokenize_with_spans

DOMAINS = ("Children", "Literature", "MidHighSchool", "News", "Wiki", "Synthetic")
SPLITS = ("train", "test")

CORPUS_FORMAT_VERSION = 1


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    """Malformed JSON; message carries the byte offset."""


class ValidationError(CorpusError):
    """Well-formed JSON that violates a corpus invariant."""


@dataclass(frozen=True)
class Turn:
    turn_id: int
    question_text: str
    answer_text: str
    span: Optional[tuple[int, int]] = None  # half-open char span into the passage

    def __post_init__(self):
        if self.turn_id < 1:
            raise ValidationError(f"turn_id must be >= 1, got {self.turn_id}")
        if self.span is not None:
            start, end = self.span
            if start >= end:
                raise ValidationError(
                    f"turn {self.turn_id}: span start >= end ({start}, {end})"
                )
            if start < 0:
                raise ValidationError(f"turn {self.turn_id}: span start < 0")


@dataclass(frozen=True)
class Utterance:
    """One turn's question and answer, concatenated in text space."""

    turn_id: int
    text: str


@dataclass(frozen=True)
class Dialogue:
    id: str
    domain: str
    passage_text: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValidationError(
                f"dialogue {self.id!r}: unknown domain {self.domain!r}"
            )
        if not self.turns:
            raise ValidationError(f"dialogue {self.id!r}: no turns")
        for expect, turn in enumerate(self.turns, start=1):
            if turn.turn_id != expect:
                raise ValidationError(
                    f"dialogue {self.id!r}: turn_ids not consecutive from 1 "
                    f"(position {expect} has turn_id {turn.turn_id})"
                )
            if turn.span is not None:
                start, end = turn.span
                if end > len(self.passage_text):
                    raise ValidationError(
                        f"dialogue {self.id!r} turn {turn.turn_id}: "
                        f"span end {end} beyond passage length {len(self.passage_text)}"
                    )
                slice_norm = strip_orthography(self.passage_text[start:end])
                answer_norm = strip_orthography(turn.answer_text)
                if answer_norm and answer_norm not in slice_norm:
                    raise ValidationError(
                        f"dialogue {self.id!r} turn {turn.turn_id}: passage span "
                        f"{self.passage_text[start:end]!r} does not contain answer "
                        f"{turn.answer_text!r} after normalization"
                    )


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple[Dialogue, ...]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        seen = set()
        for d in self.dialogues:
            if d.id in seen:
                raise ValidationError(f"duplicate dialogue id {d.id!r}")
            seen.add(d.id)

    def __len__(self) -> int:
        return len(self.dialogues)


@dataclass(frozen=True)
class HistoryWindow:
    """The last m (question, answer) pairs plus the current question, flattened.

    `parts` holds the texts in chronological order: q, a alternating for the
    retained history, then the current question last. `flattened_text` joins
    the non-empty parts with single spaces.
    """

    m: int
    parts: tuple[str, ...] = field(default=())

    @property
    def flattened_text(self) -> str:
        return " ".join(p for p in self.parts if p)


def build_history_window(dialogue: Dialogue, l: int, m: int) -> HistoryWindow:
    """History window for turn l: the last min(m, l-1) q/a pairs, then question l."""
    if not 1 <= l <= len(dialogue.turns):
        raise IndexError(
            f"turn index {l} out of range 1..{len(dialogue.turns)} "
            f"for dialogue {dialogue.id!r}"
        )
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    take = min(m, l - 1)
    parts: list[str] = []
    for turn in dialogue.turns[l - 1 - take : l - 1]:
        parts.append(turn.question_text)
        parts.append(turn.answer_text)
    parts.append(dialogue.turns[l - 1].question_text)
    return HistoryWindow(m=m, parts=tuple(parts))


def resolve_answer_span(passage: str, answer_text: str) -> Optional[tuple[int, int]]:
    """First word-aligned occurrence of the normalized answer in the passage.

    Returns original half-open char offsets covering the matched words, or
    None when the answer does not occur. Deterministic: ties break to the
    earliest occurrence.
    """
    if not passage:
        raise ValueError("passage must be non-empty")
    answer_words = strip_orthography(answer_text).split()
    if not answer_words:
        return None
    passage_words = tokenize_with_spans(passage)
    n = len(answer_words)
    for i in range(len(passage_words) - n + 1):
        if [w for w, _, _ in passage_words[i : i + n]] == answer_words:
            return (passage_words[i][1], passage_words[i + n - 1][2])
    return None


def utterance_of(turn: Turn) -> Utterance:
    """Concatenate a turn's question and answer (question first)."""
    text = " ".join(p for p in (turn.question_text, turn.answer_text) if p)
    return Utterance(turn_id=turn.turn_id, text=text)


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise ValidationError(f"{context}: missing field {key!r}")
    return record[key]


def load_corpus(path: str | Path, split: str = "train") -> Corpus:
    """Load a corpus JSON file; validates every dialogue invariant."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON at byte offset {e.pos}: {e.msg}") from e
    if not isinstance(doc, dict) or doc.get("version") != CORPUS_FORMAT_VERSION:
        raise ValidationError(
            f"{path}: expected top-level object with version={CORPUS_FORMAT_VERSION}"
        )
    dialogues = []
    for rec in _require(doc, "data", str(path)):
        did = _require(rec, "id", str(path))
        context = f"dialogue {did!r}"
        questions = {q["turn_id"]: q for q in _require(rec, "questions", context)}
        answers = {a["turn_id"]: a for a in _require(rec, "answers", context)}
        if set(questions) != set(answers):
            raise ValidationError(f"{context}: question/answer turn_ids differ")
        turns = []
        for turn_id in sorted(questions):
            q, a = questions[turn_id], answers[turn_id]
            start, end = a.get("span_start"), a.get("span_end")
            span = (start, end) if start is not None and end is not None else None
            try:
                turns.append(
                    Turn(
                        turn_id=turn_id,
                        question_text=q["input_text"],
                        answer_text=a["input_text"],
                        span=span,
                    )
                )
            except ValidationError as e:
                raise ValidationError(f"{context}: {e}") from e
        dialogues.append(
            Dialogue(
                id=str(did),
                domain=_require(rec, "domain", context),
                passage_text=_require(rec, "story", context),
                turns=tuple(turns),
            )
        )
    return Corpus(dialogues=tuple(dialogues), split=split)


def corpus_to_dict(corpus: Corpus) -> dict:
    data = []
    for d in corpus.dialogues:
        questions = [
            {"turn_id": t.turn_id, "input_text": t.question_text} for t in d.turns
        ]
        answers = [
            {
                "turn_id": t.turn_id,
                "input_text": t.answer_text,
                "span_start": t.span[0] if t.span else None,
                "span_end": t.span[1] if t.span else None,
            }
            for t in d.turns
        ]
        data.append(
            {
                "id": d.id,
                "domain": d.domain,
                "story": d.passage_text,
                "questions": questions,
                "answers": answers,
            }
        )
    return {"version": CORPUS_FORMAT_VERSION, "data": data}


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(corpus_to_dict(corpus), ensure_ascii=False, indent=1),
        encoding="utf-8",
    )
