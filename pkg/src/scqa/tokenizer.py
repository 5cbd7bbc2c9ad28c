"""Word-level vocabulary with reserved special tokens.

Reserved layout is fixed for checkpoint stability:
[PAD]=0 [UNK]=1 [CLS]=2 [SEP]=3 [INC]=4 [INS]=5.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import Corpus
from .textnorm import strip_orthography

PAD, UNK, CLS, SEP, INC, INS = range(6)
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[INC]", "[INS]")

VOCAB_FILE_HEADER = "# scqa vocab v1 reserved=" + ",".join(RESERVED)


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    id_of: dict[str, int]
    token_of: dict[int, str]

    def __post_init__(self):
        for i, tok in enumerate(RESERVED):
            if self.id_of.get(tok) != i or self.token_of.get(i) != tok:
                raise TokenizerError(f"reserved token {tok} must have id {i}")
        if len(self.id_of) != len(self.token_of):
            raise TokenizerError("id_of/token_of are not a bijection")

    def __len__(self) -> int:
        return len(self.id_of)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        for i in range(len(self.token_of)):
            h.update(self.token_of[i].encode("utf-8") + b"\n")
        return h.hexdigest()


def _from_tokens(tokens: list[str]) -> Vocab:
    id_of = {tok: i for i, tok in enumerate(list(RESERVED) + tokens)}
    token_of = {i: tok for tok, i in id_of.items()}
    return Vocab(id_of=id_of, token_of=token_of)


def build_vocab(corpus: Corpus, min_freq: int = 1, max_size: int = 50000) -> Vocab:
    """Frequency-ranked word vocabulary (ties broken lexicographically)."""
    if not corpus.dialogues:
        raise TokenizerError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for d in corpus.dialogues:
        counts.update(strip_orthography(d.passage_text).split())
        for t in d.turns:
            counts.update(strip_orthography(t.question_text).split())
            counts.update(strip_orthography(t.answer_text).split())
    ranked = sorted(
        (w for w, c in counts.items() if c >= min_freq),
        key=lambda w: (-counts[w], w),
    )
    return _from_tokens(ranked[: max(0, max_size - len(RESERVED))])


def encode(vocab: Vocab, text: str) -> list[int]:
    """Whitespace-tokenize after orthography stripping; OOV maps to [UNK].

    Special-token literals appearing as standalone words pass through to
    their reserved ids.
    """
    ids = []
    for raw in text.split():
        if raw in vocab.id_of and raw in RESERVED:
            ids.append(vocab.id_of[raw])
            continue
        word = strip_orthography(raw)
        if word:
            ids.append(vocab.id_of.get(word, UNK))
    return ids


def decode(vocab: Vocab, ids: list[int]) -> str:
    try:
        return " ".join(vocab.token_of[i] for i in ids)
    except KeyError as e:
        raise TokenizerError(f"unknown token id {e.args[0]}") from e


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    lines = [VOCAB_FILE_HEADER]
    lines += [vocab.token_of[i] for i in range(len(RESERVED), len(vocab))]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# scqa vocab v1"):
        raise TokenizerError(f"{path}: missing or unsupported vocab header")
    return _from_tokens([ln for ln in lines[1:] if ln])
