"""Orthography stripping and normalized tokenization with source offsets.

Shared by the corpus loader (answer-span resolution), the tokenizer, and
the noise simulator, so that all three agree on what a "word" is.
"""

from __future__ import annotations

import string

_PUNCT = set(string.punctuation)


def strip_orthography(text: str) -> str:
    """Lowercase, drop punctuation characters, collapse whitespace."""
    kept = []
    for ch in text:
        if ch in _PUNCT:
            continue
        kept.append(ch.lower())
    return " ".join("".join(kept).split())


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    """Split into normalized words, keeping half-open char spans into `text`.

    A word's span covers exactly the original characters that survived
    normalization (punctuation at the edges is excluded). Words that
    normalize to nothing (pure punctuation) are dropped.
    """
    out = []
    word_chars: list[str] = []
    word_origins: list[int] = []

    def flush() -> None:
        if word_chars:
            out.append(("".join(word_chars), word_origins[0], word_origins[-1] + 1))
            word_chars.clear()
            word_origins.clear()

    for i, ch in enumerate(text):
        if ch.isspace():
            flush()
        elif ch in _PUNCT:
            continue
        else:
            word_chars.append(ch.lower())
            word_origins.append(i)
    flush()
    return out
