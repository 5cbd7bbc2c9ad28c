"""Training-example construction for the four tasks.

QA: [CLS] history+question [SEP] passage [SEP], labeled with the answer's
token span. INC: delete one of k consecutive utterances, mark every slot it
could have come from. INS: splice a foreign utterance into k consecutive
ones, mark every utterance. QUE: k candidate sequences, one per question,
scored against the dialogue context and passage.

INC slot semantics: slot j means the deleted utterance originally preceded
survivor j; the terminal slot means it was last. Reinserting at the labeled
slot reproduces the original window, which is what the tests check.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .corpus import Corpus, Dialogue, build_history_window, resolve_answer_span, utterance_of
from .seeding import derived_rng, stable_hash
from .textnorm import tokenize_with_spans
from .tokenizer import CLS, INC, INS, SEP, Vocab, encode

TASKS = ("QA", "INC", "INS", "QUE")

Label = Union[tuple[int, int], tuple[int, ...], int]


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    k: int = 9
    m: int = 2
    max_len: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.m < 0:
            raise ValueError(f"m must be >= 0, got {self.m}")


@dataclass(frozen=True)
class TaskExample:
    task: str
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    marker_positions: tuple[int, ...]
    # QA: (start, end) token span, inclusive. INC/INS: one-hot over markers.
    # QUE: index of the true question among the candidates.
    label: Optional[Label]
    dialogue_id: str
    seed_used: int

    @property
    def label_index(self) -> int:
        """Positive slot for INC/INS, candidate index for QUE."""
        if self.task == "QUE":
            return int(self.label)
        if self.task in ("INC", "INS"):
            return list(self.label).index(1)
        raise ValueError(f"label_index undefined for task {self.task}")


def candidate_slices(example: TaskExample) -> list[tuple[int, int]]:
    """Half-open (start, stop) ranges of each QUE candidate in token_ids."""
    if example.task != "QUE":
        raise ValueError("candidate_slices applies to QUE examples")
    starts = list(example.marker_positions)
    stops = starts[1:] + [len(example.token_ids)]
    return list(zip(starts, stops))


def _segments_after_first_sep(token_ids: Sequence[int]) -> tuple[int, ...]:
    segs = []
    seen_sep = False
    for tok in token_ids:
        segs.append(1 if seen_sep else 0)
        if tok == SEP and not seen_sep:
            seen_sep = True
    return tuple(segs)


def _trim_longest(utterances: list[list[int]], budget: int) -> None:
    """Drop trailing tokens from the longest utterances until they fit budget.

    Keeps at least one token per non-empty utterance. In-place.
    """
    total = sum(len(u) for u in utterances)
    while total > budget:
        longest = max(range(len(utterances)), key=lambda i: len(utterances[i]))
        if len(utterances[longest]) <= 1:
            raise GenerationError(
                f"cannot fit {len(utterances)} utterances into {budget} tokens"
            )
        utterances[longest].pop()
        total -= 1


# ---------------------------------------------------------------------------
# QA (span prediction)
# ---------------------------------------------------------------------------

def build_qa_input(
    dialogue: Dialogue,
    l: int,
    cfg: GenConfig,
    vocab: Vocab,
    require_span: bool = True,
) -> Optional[TaskExample]:
    """Assemble one QA example for turn l, or None when it must be skipped.

    Skips (None): the answer has no resolvable span, or truncation cut the
    gold span away. Dropping history to make room is attempted before
    giving up; a question that cannot fit on its own raises.
    """
    turn = dialogue.turns[l - 1]
    passage = dialogue.passage_text
    passage_words = tokenize_with_spans(passage)
    passage_tokens = encode(vocab, passage)

    span = turn.span
    if span is None:
        span = resolve_answer_span(passage, turn.answer_text)

    m = cfg.m
    while True:
        head = [CLS] + encode(vocab, build_history_window(dialogue, l, m).flattened_text) + [SEP]
        room = cfg.max_len - len(head) - 1  # final [SEP]
        if room >= 1 or not passage_tokens:
            break
        if m == 0:
            raise GenerationError(
                f"dialogue {dialogue.id!r} turn {l}: question alone exceeds "
                f"max_len {cfg.max_len}"
            )
        m -= 1  # shed oldest history rounds until the passage fits

    kept = passage_tokens[: max(room, 0)]
    label: Optional[tuple[int, int]] = None
    if span is not None:
        s_char, e_char = span
        overlap = [
            i
            for i, (_, ws, we) in enumerate(passage_words)
            if we > s_char and ws < e_char
        ]
        if overlap and overlap[-1] < len(kept):
            label = (len(head) + overlap[0], len(head) + overlap[-1])
    if require_span and label is None:
        return None  # no resolvable span, or the gold span got truncated away

    token_ids = tuple(head + kept + [SEP])
    return TaskExample(
        task="QA",
        token_ids=token_ids,
        segment_ids=_segments_after_first_sep(token_ids),
        marker_positions=(),
        label=label,
        dialogue_id=dialogue.id,
        seed_used=stable_hash(cfg.seed, "QA", dialogue.id, l),
    )


def qa_passage_region(example: TaskExample) -> tuple[int, int]:
    """Half-open token range of the passage (segment 1, final [SEP] excluded)."""
    first_sep = example.token_ids.index(SEP)
    return (first_sep + 1, len(example.token_ids) - 1)


# ---------------------------------------------------------------------------
# INC (incoherence discrimination)
# ---------------------------------------------------------------------------

def build_incoherence_example(
    window_tokens: list[list[int]],
    t: int,
    dialogue_id: str,
    seed_used: int,
    max_len: int,
) -> TaskExample:
    """Deterministic assembly: delete utterance t (1-based) from the window."""
    k = len(window_tokens)
    target = list(window_tokens[t - 1])
    survivors = [list(u) for i, u in enumerate(window_tokens) if i != t - 1]
    budget = max_len - (1 + k + 2)  # [CLS], k markers, two [SEP]
    _trim_longest(survivors + [target], budget)

    token_ids: list[int] = [CLS]
    markers: list[int] = []
    for surv in survivors:
        markers.append(len(token_ids))
        token_ids.append(INC)
        token_ids.extend(surv)
    markers.append(len(token_ids))
    token_ids.append(INC)  # terminal slot: "the deleted utterance was last"
    token_ids.append(SEP)
    token_ids.extend(target)
    token_ids.append(SEP)

    label = tuple(1 if slot == t - 1 else 0 for slot in range(k))
    return TaskExample(
        task="INC",
        token_ids=tuple(token_ids),
        segment_ids=_segments_after_first_sep(token_ids),
        marker_positions=tuple(markers),
        label=label,
        dialogue_id=dialogue_id,
        seed_used=seed_used,
    )


def gen_incoherence(
    dialogue: Dialogue, cfg: GenConfig, rng: np.random.Generator, vocab: Vocab
) -> TaskExample:
    """Random window of k consecutive utterances with one deleted."""
    n_turns = len(dialogue.turns)
    if n_turns < 2:
        raise GenerationError(
            f"dialogue {dialogue.id!r}: need at least 2 turns for incoherence examples"
        )
    k = min(cfg.k, n_turns)
    start = int(rng.integers(0, n_turns - k + 1))
    window = [
        encode(vocab, utterance_of(turn).text)
        for turn in dialogue.turns[start : start + k]
    ]
    t = int(rng.integers(1, k + 1))
    seed_used = int(rng.integers(0, 2**63))
    return build_incoherence_example(window, t, dialogue.id, seed_used, cfg.max_len)


# ---------------------------------------------------------------------------
# INS (insertion detection)
# ---------------------------------------------------------------------------

def build_insertion_example(
    window_tokens: list[list[int]],
    donor_tokens: list[int],
    position: int,
    dialogue_id: str,
    seed_used: int,
    max_len: int,
) -> TaskExample:
    """Deterministic assembly: donor inserted at 1-based position in 1..k+1."""
    k = len(window_tokens)
    merged = [list(u) for u in window_tokens]
    merged.insert(position - 1, list(donor_tokens))
    budget = max_len - (1 + (k + 1) + 1)  # [CLS], k+1 markers, final [SEP]
    _trim_longest(merged, budget)

    token_ids: list[int] = [CLS]
    markers: list[int] = []
    for utt in merged:
        markers.append(len(token_ids))
        token_ids.append(INS)
        token_ids.extend(utt)
    token_ids.append(SEP)

    label = tuple(1 if slot == position - 1 else 0 for slot in range(k + 1))
    return TaskExample(
        task="INS",
        token_ids=tuple(token_ids),
        segment_ids=_segments_after_first_sep(token_ids),
        marker_positions=tuple(markers),
        label=label,
        dialogue_id=dialogue_id,
        seed_used=seed_used,
    )


def gen_insertion(
    dialogue: Dialogue,
    donor_dialogue: Dialogue,
    cfg: GenConfig,
    rng: np.random.Generator,
    vocab: Vocab,
) -> TaskExample:
    """k consecutive source utterances plus one random donor utterance."""
    if donor_dialogue.id == dialogue.id:
        raise GenerationError("donor dialogue must differ from the source dialogue")
    if not donor_dialogue.turns:
        raise GenerationError(f"donor dialogue {donor_dialogue.id!r} has no turns")
    n_turns = len(dialogue.turns)
    if n_turns < 2:
        raise GenerationError(
            f"dialogue {dialogue.id!r}: need at least 2 turns for insertion examples"
        )
    k = min(cfg.k, n_turns)
    start = int(rng.integers(0, n_turns - k + 1))
    window = [
        encode(vocab, utterance_of(turn).text)
        for turn in dialogue.turns[start : start + k]
    ]
    donor_turn = donor_dialogue.turns[int(rng.integers(0, len(donor_dialogue.turns)))]
    donor = encode(vocab, utterance_of(donor_turn).text)
    position = int(rng.integers(1, k + 2))
    seed_used = int(rng.integers(0, 2**63))
    return build_insertion_example(
        window, donor, position, dialogue.id, seed_used, cfg.max_len
    )


# ---------------------------------------------------------------------------
# QUE (question prediction)
# ---------------------------------------------------------------------------

def build_question_prediction_example(
    context_tokens: list[int],
    candidate_questions: list[list[int]],
    passage_tokens: list[int],
    label: int,
    dialogue_id: str,
    seed_used: int,
    max_len: int,
) -> TaskExample:
    """One [CLS] context question [SEP] passage [SEP] sequence per candidate.

    Candidates are stored back to back; marker_positions hold each
    candidate's [CLS]. Each candidate independently obeys max_len: the
    passage is cut from the end first, then the context from the front.
    """
    token_ids: list[int] = []
    segment_ids: list[int] = []
    markers: list[int] = []
    for cand in candidate_questions:
        ctx = list(context_tokens)
        head_len = 1 + len(ctx) + len(cand) + 1
        while head_len + 1 > max_len and ctx:
            ctx.pop(0)
            head_len -= 1
        if head_len + 1 > max_len:
            raise GenerationError(
                f"candidate question of {len(cand)} tokens cannot fit max_len {max_len}"
            )
        room = max_len - head_len - 1
        seq = [CLS] + ctx + cand + [SEP] + passage_tokens[:room] + [SEP]
        markers.append(len(token_ids))
        token_ids.extend(seq)
        segment_ids.extend(_segments_after_first_sep(seq))
    return TaskExample(
        task="QUE",
        token_ids=tuple(token_ids),
        segment_ids=tuple(segment_ids),
        marker_positions=tuple(markers),
        label=label,
        dialogue_id=dialogue_id,
        seed_used=seed_used,
    )


def gen_question_prediction(
    dialogue: Dialogue,
    l: int,
    cfg: GenConfig,
    rng: np.random.Generator,
    question_pool: Sequence[tuple[str, str]],
    vocab: Vocab,
) -> TaskExample:
    """Pick the true question of turn l out of k shuffled candidates.

    question_pool holds (dialogue_id, question_text) pairs gathered
    corpus-wide; only other dialogues' questions are used as distractors.
    """
    if not 1 <= l <= len(dialogue.turns):
        raise IndexError(f"turn index {l} out of range for dialogue {dialogue.id!r}")
    eligible = [q for did, q in question_pool if did != dialogue.id]
    if len(eligible) < cfg.k - 1:
        raise GenerationError(
            f"question pool has {len(eligible)} usable distractors, "
            f"need k-1 = {cfg.k - 1}"
        )
    picks = rng.choice(len(eligible), size=cfg.k - 1, replace=False)
    candidates = [dialogue.turns[l - 1].question_text] + [eligible[int(i)] for i in picks]
    order = rng.permutation(cfg.k)
    shuffled = [candidates[int(i)] for i in order]
    label = int(np.nonzero(order == 0)[0][0])

    context_text = " ".join(
        utterance_of(turn).text for turn in dialogue.turns[: l - 1]
    )
    seed_used = int(rng.integers(0, 2**63))
    return build_question_prediction_example(
        context_tokens=encode(vocab, context_text),
        candidate_questions=[encode(vocab, q) for q in shuffled],
        passage_tokens=encode(vocab, dialogue.passage_text),
        label=label,
        dialogue_id=dialogue.id,
        seed_used=seed_used,
        max_len=cfg.max_len,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_example(example: TaskExample, cfg: GenConfig) -> None:
    """Assert every TaskExample invariant; raises AssertionError on violation."""
    ids, segs = example.token_ids, example.segment_ids
    assert len(ids) == len(segs), "token/segment length mismatch"
    assert example.task in TASKS, f"unknown task {example.task}"

    if example.task == "QUE":
        spans = candidate_slices(example)
        assert len(spans) == cfg.k, f"expected {cfg.k} candidates, got {len(spans)}"
        for start, stop in spans:
            assert stop - start <= cfg.max_len, "candidate exceeds max_len"
            assert ids[start] == CLS, "candidate does not start with [CLS]"
            _check_segment_boundary(ids[start:stop], segs[start:stop])
        assert isinstance(example.label, int) and 0 <= example.label < cfg.k
        return

    assert len(ids) <= cfg.max_len, "sequence exceeds max_len"
    assert ids[0] == CLS, "sequence does not start with [CLS]"
    _check_segment_boundary(ids, segs)

    if example.task == "QA":
        start, end = example.label
        assert start <= end, "QA label start > end"
        lo, hi = qa_passage_region(example)
        assert lo <= start and end < hi, "QA label outside the passage segment"
        assert segs[start] == 1 and segs[end] == 1, "QA label not in segment 1"
        return

    marker_token = INC if example.task == "INC" else INS
    markers = example.marker_positions
    assert len(markers) >= 2, "too few marker slots"
    for pos in markers:
        assert ids[pos] == marker_token, f"marker position {pos} is not a marker token"
    assert len(example.label) == len(markers), "label length != marker count"
    assert sum(example.label) == 1 and set(example.label) <= {0, 1}, "label not one-hot"
    if example.task == "INC":
        assert ids.count(marker_token) == len(markers), "stray marker tokens"
        assert ids.count(SEP) == 2, "INC must carry the deleted utterance after [SEP]"


def _check_segment_boundary(ids: Sequence[int], segs: Sequence[int]) -> None:
    first_sep = ids.index(SEP) if SEP in ids else len(ids) - 1
    for i, seg in enumerate(segs):
        expect = 0 if i <= first_sep else 1
        assert seg == expect, f"segment id at {i} is {seg}, expected {expect}"


# ---------------------------------------------------------------------------
# Dataset driver + serialization
# ---------------------------------------------------------------------------

def generate_dataset(
    corpus: Corpus,
    cfg: GenConfig,
    mix: dict[str, int],
    vocab: Vocab,
    seed: Optional[int] = None,
) -> tuple[list[TaskExample], dict[str, int]]:
    """Generate per-task example counts; deterministic given (corpus, cfg, mix).

    Per-example randomness is keyed on hash(seed, task, dialogue_id, index),
    so generation order never changes the output. Returns (examples, skips);
    emitted counts equal the requested mix minus the recorded skips.
    """
    seed = cfg.seed if seed is None else seed
    for task, count in mix.items():
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r} in mix")
        if count < 0:
            raise ValueError(f"negative count for task {task!r}")
    dialogues = corpus.dialogues
    examples: list[TaskExample] = []
    skips: dict[str, int] = {}

    def skip(reason: str) -> None:
        skips[reason] = skips.get(reason, 0) + 1

    qa_slots = [
        (d, l) for d in dialogues for l in range(1, len(d.turns) + 1)
    ][: mix.get("QA", 0)]
    for d, l in qa_slots:
        ex = build_qa_input(d, l, cfg, vocab)
        if ex is None:
            skip("QA:no_span_or_truncated")
        else:
            examples.append(ex)

    pool = [
        (d.id, t.question_text) for d in dialogues for t in d.turns
    ]
    for task in ("INC", "INS", "QUE"):
        for i in range(mix.get(task, 0)):
            d = dialogues[i % len(dialogues)]
            rng = derived_rng(seed, task, d.id, i)
            try:
                if task == "INC":
                    ex = gen_incoherence(d, cfg, rng, vocab)
                elif task == "INS":
                    others = [x for x in dialogues if x.id != d.id]
                    if not others:
                        raise GenerationError("no donor dialogue available")
                    donor = others[int(rng.integers(0, len(others)))]
                    ex = gen_insertion(d, donor, cfg, rng, vocab)
                else:
                    l = int(rng.integers(1, len(d.turns) + 1))
                    ex = gen_question_prediction(d, l, cfg, rng, pool, vocab)
            except GenerationError:
                skip(f"{task}:generation_error")
                continue
            examples.append(ex)
    return examples, skips


def example_to_dict(example: TaskExample) -> dict:
    rec = asdict(example)
    rec["token_ids"] = list(example.token_ids)
    rec["segment_ids"] = list(example.segment_ids)
    rec["marker_positions"] = list(example.marker_positions)
    if isinstance(example.label, tuple):
        rec["label"] = list(example.label)
    return rec


def example_from_dict(rec: dict) -> TaskExample:
    label = rec["label"]
    if isinstance(label, list):
        label = tuple(label)
    return TaskExample(
        task=rec["task"],
        token_ids=tuple(rec["token_ids"]),
        segment_ids=tuple(rec["segment_ids"]),
        marker_positions=tuple(rec["marker_positions"]),
        label=label,
        dialogue_id=rec["dialogue_id"],
        seed_used=rec["seed_used"],
    )


def write_examples(
    path: str | Path,
    examples: Sequence[TaskExample],
    cfg: GenConfig,
    mix: dict[str, int],
    skips: dict[str, int],
) -> Path:
    """JSONL file plus a sidecar manifest with config, counts, and content hash."""
    path = Path(path)
    lines = [json.dumps(example_to_dict(ex), separators=(",", ":")) for ex in examples]
    blob = ("\n".join(lines) + "\n") if lines else ""
    path.write_text(blob, encoding="utf-8")
    manifest = {
        "config": asdict(cfg),
        "mix": mix,
        "skips": skips,
        "examples": len(examples),
        "sha256": hashlib.sha256(blob.encode("utf-8")).hexdigest(),
    }
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest_path


def read_examples(path: str | Path) -> list[TaskExample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(example_from_dict(json.loads(line)))
    return out
