"""Transformer encoder with span, marker (INC/INS), and question-scoring heads.

Trains from seeded random initialization (normal, std 0.02). All four head
projections start at zero so an untrained model produces exactly uniform
predictions: QA span loss 2*ln(n), marker BCE ln(2), question selection
ln(k). The tests lean on those closed forms.

Sequences are encoded in padded batches ((B*S, H) internally, one graph per
batch); [PAD] keys are masked out of attention so padding never changes the
real positions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .taskgen import TaskExample, candidate_slices, qa_passage_region
from .tokenizer import PAD

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 128
    activation: str = "gelu"  # or "relu"
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def desk_defaults(cls, vocab_size: int, **overrides) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def paper_defaults(cls, vocab_size: int, **overrides) -> "ModelConfig":
        base = cls(
            vocab_size=vocab_size, layers=12, hidden=768, heads=12, max_len=512
        )
        return replace(base, **overrides)


@dataclass
class EncoderOutput:
    hidden_states: T.Tensor  # (seq_len, hidden)


@dataclass
class BatchEncoding:
    hidden: T.Tensor  # (batch * seq, hidden)
    batch: int
    seq: int

    def row(self, b: int, pos: int) -> int:
        return b * self.seq + pos


HEAD_PARAM_PREFIXES = {
    "QA": "head.span",
    "INC": "head.inc",
    "INS": "head.ins",
    "QUE": "head.que",
}


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.Generator(np.random.PCG64(config.seed))
        h, std = config.hidden, config.init_std

        def normal(name, *shape):
            self.params[name] = T.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def zeros(name, *shape):
            self.params[name] = T.Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, *shape):
            self.params[name] = T.Tensor(np.ones(shape), requires_grad=True)

        normal("emb.tok", config.vocab_size, h)
        normal("emb.pos", config.max_len, h)
        normal("emb.seg", 2, h)
        for i in range(config.layers):
            p = f"layer{i}"
            for mat in ("wq", "wk", "wv", "wo"):
                normal(f"{p}.attn.{mat}", h, h)
            # No key bias: softmax scores are invariant to a constant key
            # shift, so the parameter would be inert (and ungradable).
            for vec in ("bq", "bv", "bo"):
                zeros(f"{p}.attn.{vec}", h)
            ones(f"{p}.ln1_g", h)
            zeros(f"{p}.ln1_b", h)
            normal(f"{p}.ffn.w1", h, h * config.ffn_mult)
            zeros(f"{p}.ffn.b1", h * config.ffn_mult)
            normal(f"{p}.ffn.w2", h * config.ffn_mult, h)
            zeros(f"{p}.ffn.b2", h)
            ones(f"{p}.ln2_g", h)
            zeros(f"{p}.ln2_b", h)
        ones("final.ln_g", h)
        zeros("final.ln_b", h)
        # Heads start at zero: untrained outputs are exactly uniform. The
        # span and question heads feed shift-invariant softmaxes, so they
        # carry no bias; the sigmoid marker heads keep theirs.
        zeros("head.span_start.w", h, 1)
        zeros("head.span_end.w", h, 1)
        zeros("head.inc.w", h, 1)
        zeros("head.inc.b", 1)
        zeros("head.ins.w", h, 1)
        zeros("head.ins.b", 1)
        zeros("head.que.w", h, 1)

    # -- parameter bookkeeping -------------------------------------------
    def head_param_names(self, task: str) -> list[str]:
        prefix = HEAD_PARAM_PREFIXES[task]
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r}: checkpoint shape {arrays[name].shape} "
                    f"!= model shape {p.data.shape}"
                )
            p.data = arrays[name].copy()

    # -- encoder -----------------------------------------------------------
    def encode_batch(
        self,
        sequences: Sequence[tuple[Sequence[int], Sequence[int]]],
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> BatchEncoding:
        """Encode padded sequences in one graph; returns (B*S, H) hidden states."""
        B = len(sequences)
        if B == 0:
            raise ValueError("cannot encode an empty batch")
        lengths = [len(ids) for ids, _ in sequences]
        S = max(lengths)
        if S == 0:
            raise ValueError("cannot encode an empty sequence")
        if S > self.config.max_len:
            raise ValueError(f"sequence length {S} exceeds max_len {self.config.max_len}")
        ids = np.full((B, S), PAD, dtype=np.intp)
        segs = np.zeros((B, S), dtype=np.intp)
        for b, (tok, seg) in enumerate(sequences):
            ids[b, : lengths[b]] = tok
            segs[b, : lengths[b]] = seg
        if ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id {ids.max()} outside vocab of {self.config.vocab_size}")

        P = self.params
        H = self.config.hidden
        nh = self.config.heads
        dh = H // nh
        act = T.gelu if self.config.activation == "gelu" else T.relu

        x = T.embedding_lookup(P["emb.tok"], ids)  # (B, S, H)
        x = x + T.slice_rows(P["emb.pos"], 0, S)
        x = x + T.embedding_lookup(P["emb.seg"], segs)
        x = T.reshape(x, (B * S, H))

        # [PAD] keys contribute nothing to attention.
        key_bias = np.where(ids == PAD, NEG_INF, 0.0)[:, None, None, :]
        scale = 1.0 / np.sqrt(dh)

        # Pre-LN blocks: stable from random initialization without warmup.
        for i in range(self.config.layers):
            p = f"layer{i}"

            def split_heads(t):
                return T.transpose(T.reshape(t, (B, S, nh, dh)), (0, 2, 1, 3))

            xn = T.layer_norm(x, P[f"{p}.ln1_g"], P[f"{p}.ln1_b"])
            q = split_heads(T.linear(xn, P[f"{p}.attn.wq"], P[f"{p}.attn.bq"]))
            k = split_heads(T.matmul(xn, P[f"{p}.attn.wk"]))
            v = split_heads(T.linear(xn, P[f"{p}.attn.wv"], P[f"{p}.attn.bv"]))
            ctx = T.attention(q, k, v, key_bias, scale)  # (B, nh, S, dh)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B * S, H))
            attn_out = T.linear(ctx, P[f"{p}.attn.wo"], P[f"{p}.attn.bo"])
            x = x + self._dropout(attn_out, dropout_rng)

            xn = T.layer_norm(x, P[f"{p}.ln2_g"], P[f"{p}.ln2_b"])
            h1 = act(T.linear(xn, P[f"{p}.ffn.w1"], P[f"{p}.ffn.b1"]))
            h2 = T.linear(h1, P[f"{p}.ffn.w2"], P[f"{p}.ffn.b2"])
            x = x + self._dropout(h2, dropout_rng)
        x = T.layer_norm(x, P["final.ln_g"], P["final.ln_b"])
        return BatchEncoding(hidden=x, batch=B, seq=S)

    def encode(
        self,
        token_ids,
        segment_ids,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> EncoderOutput:
        """Encode one sequence; same path as encode_batch with batch size 1."""
        enc = self.encode_batch([(token_ids, segment_ids)], dropout_rng)
        return EncoderOutput(
            hidden_states=T.slice_rows(enc.hidden, 0, len(token_ids))
        )

    def _dropout(self, x: T.Tensor, rng: Optional[np.random.Generator]) -> T.Tensor:
        p = self.config.dropout
        if p <= 0.0 or rng is None:
            return x
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * T.Tensor(mask)

    # -- heads (single example) --------------------------------------------
    def span_head(self, enc: EncoderOutput, passage_mask) -> tuple[T.Tensor, T.Tensor]:
        """Masked start/end distributions over the passage positions."""
        mask = np.asarray(passage_mask, dtype=bool)
        if not mask.any():
            raise ValueError("span head needs a non-empty passage mask")
        n = enc.hidden_states.shape[0]
        if mask.shape != (n,):
            raise T.ShapeError(f"passage mask {mask.shape} does not match sequence {n}")
        bias = T.Tensor(np.where(mask, 0.0, NEG_INF))
        P = self.params
        start_logits = T.reshape(T.matmul(enc.hidden_states, P["head.span_start.w"]), (n,))
        end_logits = T.reshape(T.matmul(enc.hidden_states, P["head.span_end.w"]), (n,))
        return T.softmax(start_logits + bias), T.softmax(end_logits + bias)

    def marker_head(self, enc: EncoderOutput, marker_positions, task: str) -> T.Tensor:
        """Per-marker probability that this slot is the manipulated one."""
        if len(marker_positions) == 0:
            raise ValueError("marker head needs at least one marker position")
        key = {"INC": "inc", "INS": "ins"}[task]
        h = T.take_rows(enc.hidden_states, marker_positions)
        logits = T.linear(h, self.params[f"head.{key}.w"], self.params[f"head.{key}.b"])
        return T.sigmoid(T.reshape(logits, (len(marker_positions),)))

    def que_score(self, enc: EncoderOutput) -> T.Tensor:
        """Signal layer: scalar similarity score from the [CLS] hidden state."""
        cls_h = T.take_rows(enc.hidden_states, [0])
        return T.reshape(T.matmul(cls_h, self.params["head.que.w"]), (1,))


def que_select(scores: list[T.Tensor], target: int) -> tuple[T.Tensor, int]:
    """Softmax selection over stacked candidate scores: (loss, argmax)."""
    if len(scores) < 2:
        raise ValueError(f"question selection needs >= 2 candidates, got {len(scores)}")
    stacked = T.concat(scores)
    return T.cross_entropy(stacked, target), int(np.argmax(stacked.data))


def _log_at(dist: T.Tensor, index: int) -> T.Tensor:
    picked = T.take_rows(T.reshape(dist, (-1, 1)), [index])
    return T.log(T.reshape(picked, ()))


def span_loss(p_start: T.Tensor, p_end: T.Tensor, label: tuple[int, int]) -> T.Tensor:
    """-log p_start[s] - log p_end[e]."""
    s, e = label
    return -(_log_at(p_start, s) + _log_at(p_end, e))


def decode_span(
    p_start: np.ndarray,
    p_end: np.ndarray,
    region: tuple[int, int],
    max_span_tokens: int = 30,
) -> tuple[int, int]:
    """Most probable (start, end) with start <= end < start + max_span_tokens."""
    lo, hi = region
    with np.errstate(divide="ignore"):
        ls = np.log(p_start[lo:hi])
        le = np.log(p_end[lo:hi])
    joint = ls[:, None] + le[None, :]
    n = hi - lo
    rows, cols = np.indices((n, n))
    joint[(cols < rows) | (cols >= rows + max_span_tokens)] = -np.inf
    flat = int(np.argmax(joint))
    return (lo + flat // n, lo + flat % n)


# ---------------------------------------------------------------------------
# batched per-task losses (one graph per single-task batch)
# ---------------------------------------------------------------------------

def _flat_projection(model: Model, enc: BatchEncoding, w: str) -> T.Tensor:
    return T.reshape(T.matmul(enc.hidden, model.params[w]), (enc.batch, enc.seq))


def qa_distributions(
    model: Model, examples: Sequence[TaskExample]
) -> tuple[T.Tensor, T.Tensor, list[tuple[int, int]]]:
    """Batched (B, S) start/end distributions plus each passage region."""
    enc = model.encode_batch([(ex.token_ids, ex.segment_ids) for ex in examples])
    B, S = enc.batch, enc.seq
    bias = np.full((B, S), NEG_INF)
    regions = []
    for b, ex in enumerate(examples):
        lo, hi = qa_passage_region(ex)
        bias[b, lo:hi] = 0.0
        regions.append((lo, hi))
    bias_t = T.Tensor(bias)
    p_start = T.softmax(_flat_projection(model, enc, "head.span_start.w") + bias_t)
    p_end = T.softmax(_flat_projection(model, enc, "head.span_end.w") + bias_t)
    return p_start, p_end, regions


def _qa_batch(model: Model, examples: Sequence[TaskExample]):
    p_start, p_end, regions = qa_distributions(model, examples)
    B, S = p_start.shape
    flat_s = T.reshape(p_start, (B * S, 1))
    flat_e = T.reshape(p_end, (B * S, 1))
    total = None
    correct = []
    for b, ex in enumerate(examples):
        s, e = ex.label
        piece = -(
            T.log(T.reshape(T.take_rows(flat_s, [b * S + s]), ()))
            + T.log(T.reshape(T.take_rows(flat_e, [b * S + e]), ()))
        )
        total = piece if total is None else total + piece
        pred = decode_span(p_start.data[b], p_end.data[b], regions[b])
        correct.append(pred == tuple(ex.label))
    return total * (1.0 / len(examples)), correct


def _marker_batch(model: Model, examples: Sequence[TaskExample]):
    task = examples[0].task
    key = {"INC": "inc", "INS": "ins"}[task]
    enc = model.encode_batch([(ex.token_ids, ex.segment_ids) for ex in examples])
    rows = []
    for b, ex in enumerate(examples):
        rows.extend(enc.row(b, pos) for pos in ex.marker_positions)
    h = T.take_rows(enc.hidden, rows)
    logits = T.linear(h, model.params[f"head.{key}.w"], model.params[f"head.{key}.b"])
    probs = T.sigmoid(T.reshape(logits, (len(rows),)))
    total = None
    correct = []
    offset = 0
    for ex in examples:
        n = len(ex.marker_positions)
        p = T.slice_rows(probs, offset, offset + n)
        piece = T.mean(T.binary_cross_entropy(p, np.asarray(ex.label, dtype=np.float64)))
        total = piece if total is None else total + piece
        correct.append(int(np.argmax(p.data)) == ex.label_index)
        offset += n
    return total * (1.0 / len(examples)), correct


def _que_batch(model: Model, examples: Sequence[TaskExample]):
    sequences = []
    counts = []
    for ex in examples:
        spans = candidate_slices(ex)
        counts.append(len(spans))
        for start, stop in spans:
            sequences.append((ex.token_ids[start:stop], ex.segment_ids[start:stop]))
    enc = model.encode_batch(sequences)
    cls_rows = [i * enc.seq for i in range(enc.batch)]
    cls_h = T.take_rows(enc.hidden, cls_rows)
    scores = T.reshape(T.matmul(cls_h, model.params["head.que.w"]), (enc.batch,))
    total = None
    correct = []
    offset = 0
    for ex, k in zip(examples, counts):
        if k < 2:
            raise ValueError(f"question selection needs >= 2 candidates, got {k}")
        row = T.slice_rows(scores, offset, offset + k)
        piece = T.cross_entropy(row, ex.label)
        total = piece if total is None else total + piece
        correct.append(int(np.argmax(row.data)) == ex.label)
        offset += k
    return total * (1.0 / len(examples)), correct


def task_batch_loss(
    model: Model, examples: Sequence[TaskExample]
) -> tuple[T.Tensor, list[bool]]:
    """Mean loss and per-example argmax correctness for a single-task batch."""
    tasks = {ex.task for ex in examples}
    if len(tasks) != 1:
        raise ValueError(f"task_batch_loss expects one task per batch, got {sorted(tasks)}")
    task = tasks.pop()
    if task == "QA":
        return _qa_batch(model, examples)
    if task in ("INC", "INS"):
        return _marker_batch(model, examples)
    if task == "QUE":
        return _que_batch(model, examples)
    raise ValueError(f"unknown task {task!r}")


def task_loss(model: Model, example: TaskExample) -> tuple[T.Tensor, bool]:
    """Loss plus argmax correctness for one example of any task."""
    loss, correct = task_batch_loss(model, [example])
    return loss, correct[0]
