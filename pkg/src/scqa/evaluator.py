"""EM/F1 scoring, per-domain reports, ablation and sweep harnesses.

Answer normalization follows the extractive-QA convention: lowercase,
strip punctuation, drop articles, collapse whitespace. F1 is token-multiset
overlap on the normalized strings; one gold answer per turn.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Corpus, Dialogue
from .model import Model, decode_span, task_batch_loss
from .seeding import stable_hash
from .taskgen import GenConfig, build_qa_input, generate_dataset
from .tokenizer import Vocab, decode
from .trainer import TrainConfig, run_training

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

ABLATION_SUBSETS: tuple[tuple[str, ...], ...] = (
    (),
    ("INC",),
    ("INS",),
    ("QUE",),
    ("INS", "QUE"),
    ("INC", "QUE"),
    ("INC", "INS"),
    ("INC", "INS", "QUE"),
)


def normalize_answer(text: str) -> str:
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def f1_score(pred: str, gold: str) -> float:
    pred_tokens = normalize_answer(pred).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    overall_em: float
    overall_f1: float
    per_domain: dict[str, tuple[float, float]]
    domain_counts: dict[str, int]
    aux_acc: dict[str, float] = field(default_factory=dict)
    config_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "overall_em": self.overall_em,
            "overall_f1": self.overall_f1,
            "per_domain": {d: {"em": em, "f1": f1} for d, (em, f1) in self.per_domain.items()},
            "domain_counts": self.domain_counts,
            "aux_acc": self.aux_acc,
            "config_fingerprint": self.config_fingerprint,
        }


def predict_answer(model: Model, vocab: Vocab, example) -> str:
    """Decode the argmax answer span of one QA example to text."""
    return predict_answers(model, vocab, [example])[0]


def predict_answers(model: Model, vocab: Vocab, examples: Sequence) -> list[str]:
    """Batched span prediction; one decoded answer string per example."""
    from .model import qa_distributions

    out = []
    for chunk_start in range(0, len(examples), 16):
        chunk = examples[chunk_start : chunk_start + 16]
        p_start, p_end, regions = qa_distributions(model, chunk)
        for b, ex in enumerate(chunk):
            s, e = decode_span(p_start.data[b], p_end.data[b], regions[b])
            out.append(decode(vocab, list(ex.token_ids[s : e + 1])))
    return out


def evaluate(
    model: Model,
    corpus: Corpus,
    m: int,
    vocab: Vocab,
    gen_cfg: Optional[GenConfig] = None,
    predictor: Optional[Callable] = None,
    aux_tasks: Sequence[str] = ("INC", "INS", "QUE"),
    warn: Callable[[str], None] = lambda msg: None,
) -> EvalReport:
    """Teacher-forced EM/F1 over all turns, plus held-out auxiliary accuracy."""
    gen_cfg = gen_cfg if gen_cfg is not None else GenConfig(m=m, max_len=model.config.max_len)
    gen_cfg = replace(gen_cfg, m=m)

    pending: list[tuple[str, str, object]] = []  # (domain, gold answer, example)
    for dialogue in corpus.dialogues:
        domain = dialogue.domain or "Unknown"
        if not dialogue.domain:
            warn(f"dialogue {dialogue.id!r} has no domain tag; grouped under Unknown")
        for l in range(1, len(dialogue.turns) + 1):
            example = build_qa_input(dialogue, l, gen_cfg, vocab, require_span=False)
            if example is None:
                continue
            pending.append((domain, dialogue.turns[l - 1].answer_text, example))

    if predictor is not None:
        preds = [predictor(model, vocab, ex) for _, _, ex in pending]
    else:
        preds = predict_answers(model, vocab, [ex for _, _, ex in pending])

    em_by_domain: dict[str, list[int]] = {}
    f1_by_domain: dict[str, list[float]] = {}
    for (domain, gold, _), pred in zip(pending, preds):
        em_by_domain.setdefault(domain, []).append(exact_match(pred, gold))
        f1_by_domain.setdefault(domain, []).append(f1_score(pred, gold))

    per_domain = {}
    counts = {}
    total_em, total_f1, total_n = 0.0, 0.0, 0
    for domain in sorted(em_by_domain):
        ems, f1s = em_by_domain[domain], f1_by_domain[domain]
        per_domain[domain] = (float(np.mean(ems)), float(np.mean(f1s)))
        counts[domain] = len(ems)
        total_em += sum(ems)
        total_f1 += sum(f1s)
        total_n += len(ems)

    aux_acc: dict[str, float] = {}
    if aux_tasks:
        held_out_seed = stable_hash(gen_cfg.seed, "eval_aux")
        mix = {t: len(corpus.dialogues) for t in aux_tasks}
        examples, _ = generate_dataset(corpus, gen_cfg, mix, vocab, seed=held_out_seed)
        by_task: dict[str, list] = {}
        for ex in examples:
            by_task.setdefault(ex.task, []).append(ex)
        for task, group in by_task.items():
            hits: list[bool] = []
            for i in range(0, len(group), 16):
                _, correct = task_batch_loss(model, group[i : i + 16])
                hits.extend(correct)
            aux_acc[task] = float(np.mean(hits))

    fingerprint = f"{stable_hash(asdict_safe(model.config), m, corpus.split, len(corpus)):016x}"
    return EvalReport(
        overall_em=total_em / total_n if total_n else 0.0,
        overall_f1=total_f1 / total_n if total_n else 0.0,
        per_domain=per_domain,
        domain_counts=counts,
        aux_acc=aux_acc,
        config_fingerprint=fingerprint,
    )


def asdict_safe(cfg) -> str:
    from dataclasses import asdict

    return json.dumps(asdict(cfg), sort_keys=True)


# ---------------------------------------------------------------------------
# experiment harnesses
# ---------------------------------------------------------------------------

@dataclass
class ExperimentRow:
    label: str
    enabled_tasks: tuple[str, ...]
    seed_reports: list[EvalReport]

    @property
    def mean_em(self) -> float:
        return float(np.mean([r.overall_em for r in self.seed_reports]))

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r.overall_f1 for r in self.seed_reports]))

    @property
    def spread_f1(self) -> float:
        vals = [r.overall_f1 for r in self.seed_reports]
        return float(np.max(vals) - np.min(vals)) if len(vals) > 1 else 0.0


def _train_and_eval(
    corpus: Corpus,
    dev_corpus: Corpus,
    train_cfg: TrainConfig,
    gen_cfg: GenConfig,
    model_seed: int,
) -> EvalReport:
    from .model import ModelConfig
    from .tokenizer import build_vocab

    vocab = build_vocab(corpus)
    model_cfg = ModelConfig(vocab_size=len(vocab), max_len=gen_cfg.max_len, seed=model_seed)
    result = run_training(corpus, train_cfg, gen_cfg, model_cfg=model_cfg, vocab=vocab)
    return evaluate(result.model, dev_corpus, gen_cfg.m, vocab, gen_cfg)


def subset_label(subset: Sequence[str]) -> str:
    return "baseline" if not subset else "+".join(["baseline"] + list(subset))


def run_ablation(
    corpus: Corpus,
    dev_corpus: Corpus,
    base_cfg: TrainConfig,
    gen_cfg: GenConfig,
    seeds: Sequence[int] = (0, 1, 2),
    subsets: Sequence[Sequence[str]] = ABLATION_SUBSETS,
) -> list[ExperimentRow]:
    """One row per auxiliary-task subset, averaged over the seeds."""
    rows = []
    for subset in subsets:
        enabled = tuple(["QA"] + list(subset))
        reports = []
        for seed in seeds:
            cfg = replace(base_cfg, enabled_tasks=enabled, seed=seed)
            reports.append(_train_and_eval(corpus, dev_corpus, cfg, gen_cfg, model_seed=seed))
        rows.append(
            ExperimentRow(label=subset_label(subset), enabled_tasks=enabled, seed_reports=reports)
        )
    return rows


def sweep_history(
    corpus: Corpus,
    dev_corpus: Corpus,
    base_cfg: TrainConfig,
    gen_cfg: GenConfig,
    m_values: Sequence[int] = (0, 1, 2, 3, 4),
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """EM/F1 per history-window size m."""
    if not m_values:
        raise ValueError("m_values must be non-empty")
    rows = []
    for m in m_values:
        reports = []
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed)
            g = replace(gen_cfg, m=m)
            reports.append(_train_and_eval(corpus, dev_corpus, cfg, g, model_seed=seed))
        rows.append(
            {
                "m": m,
                "em": float(np.mean([r.overall_em for r in reports])),
                "f1": float(np.mean([r.overall_f1 for r in reports])),
            }
        )
    return rows


def _cap_turns(corpus: Corpus, cap: int) -> Corpus:
    dialogues = []
    for d in corpus.dialogues:
        dialogues.append(
            Dialogue(id=d.id, domain=d.domain, passage_text=d.passage_text, turns=d.turns[:cap])
        )
    return Corpus(dialogues=tuple(dialogues), split=corpus.split)


def sweep_turns(
    corpus: Corpus,
    dev_corpus: Corpus,
    base_cfg: TrainConfig,
    gen_cfg: GenConfig,
    turn_caps: Sequence[int],
    seeds: Sequence[int] = (0,),
    subsets: Sequence[Sequence[str]] = ((), ("INC",), ("INS",), ("QUE",), ("INC", "INS", "QUE")),
) -> list[dict]:
    """F1 per (dialogue-turn cap, task combination) pair."""
    if not turn_caps:
        raise ValueError("turn_caps must be non-empty")
    rows = []
    for cap in turn_caps:
        capped_train = _cap_turns(corpus, cap)
        capped_dev = _cap_turns(dev_corpus, cap)
        for subset in subsets:
            enabled = tuple(["QA"] + list(subset))
            f1s = []
            for seed in seeds:
                cfg = replace(base_cfg, enabled_tasks=enabled, seed=seed)
                report = _train_and_eval(capped_train, capped_dev, cfg, gen_cfg, model_seed=seed)
                f1s.append(report.overall_f1)
            rows.append(
                {"turns": cap, "tasks": subset_label(subset), "f1": float(np.mean(f1s))}
            )
    return rows


# ---------------------------------------------------------------------------
# table rendering
# ---------------------------------------------------------------------------

def ablation_markdown(rows: list[ExperimentRow]) -> str:
    domains = sorted({d for row in rows for r in row.seed_reports for d in r.per_domain})
    header = ["Configuration"] + domains + ["Overall F1", "Overall EM", "F1 spread"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        cells = [row.label]
        for domain in domains:
            vals = [r.per_domain[domain][1] for r in row.seed_reports if domain in r.per_domain]
            cells.append(f"{np.mean(vals):.3f}" if vals else "-")
        cells += [f"{row.mean_f1:.3f}", f"{row.mean_em:.3f}", f"{row.spread_f1:.3f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def history_markdown(rows: list[dict]) -> str:
    lines = ["| history rounds m | EM | F1 |", "|---|---|---|"]
    for row in rows:
        lines.append(f"| {row['m']} | {row['em']:.3f} | {row['f1']:.3f} |")
    return "\n".join(lines)


def turns_markdown(rows: list[dict]) -> str:
    lines = ["| max turns | tasks | F1 |", "|---|---|---|"]
    for row in rows:
        lines.append(f"| {row['turns']} | {row['tasks']} | {row['f1']:.3f} |")
    return "\n".join(lines)
