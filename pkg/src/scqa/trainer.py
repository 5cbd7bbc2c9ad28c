"""Joint multi-task training: batch mixing, equal-ratio loss, checkpoints.

Every batch holds examples of a single task; task batches interleave
round-robin according to mix_ratio. The combined loss is the unweighted sum
of the per-task mean losses present in the step. Auxiliary examples are
regenerated each epoch with epoch-derived seeds unless frozen.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus
from .model import Model, ModelConfig, task_batch_loss
from .seeding import derived_rng, stable_hash
from .taskgen import TASKS, GenConfig, TaskExample, generate_dataset
from .tokenizer import Vocab, build_vocab

CHECKPOINT_MAGIC = b"SCQACP01"


class TrainingAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    enabled_tasks: tuple[str, ...] = ("QA", "INC", "INS", "QUE")
    epochs: int = 6
    batch_size: int = 4
    lr: float = 3e-5
    seed: int = 0
    mix_ratio: Optional[dict[str, int]] = None  # round-robin weights, default 1 each
    aux_per_dialogue: int = 1
    freeze_aux: bool = False  # regenerate auxiliary examples per epoch by default

    def __post_init__(self):
        unknown = set(self.enabled_tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        if "QA" not in self.enabled_tasks:
            raise ValueError("QA must stay enabled; EM/F1 evaluation depends on it")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def combine_losses(losses: dict, required: Optional[Sequence[str]] = None):
    """Unweighted sum of per-task losses (floats or graph tensors)."""
    if required is not None:
        missing = [t for t in required if t not in losses]
        if missing:
            raise ValueError(f"missing losses for enabled tasks {missing}")
    total = None
    for value in losses.values():
        total = value if total is None else total + value
    if total is None:
        raise ValueError("no losses to combine")
    return total


@dataclass
class StepMetrics:
    step: int
    epoch: int
    losses: dict[str, float]
    accs: dict[str, float]
    combined: float


def train_step(
    model: Model, batch: Sequence[TaskExample], adam: T.AdamState
) -> StepMetrics:
    """One forward/backward/Adam update over a (possibly mixed) batch."""
    if not batch:
        raise ValueError("empty batch")
    by_task: dict[str, list[TaskExample]] = {}
    for ex in batch:
        by_task.setdefault(ex.task, []).append(ex)

    losses: dict[str, T.Tensor] = {}
    accs: dict[str, float] = {}
    for task, examples in by_task.items():
        mean_loss, correct = task_batch_loss(model, examples)
        losses[task] = mean_loss
        accs[task] = sum(correct) / len(correct)

    combined = combine_losses(losses)
    if not np.isfinite(combined.data):
        bad_task = next(
            (t for t, v in losses.items() if not np.isfinite(v.data)), "unknown"
        )
        probe = by_task.get(bad_task, batch)[0]
        enc = model.encode(probe.token_ids, probe.segment_ids)
        raise TrainingAbort(
            f"non-finite loss (task={bad_task}, "
            f"max|activation|={np.abs(enc.hidden_states.data).max():.3e})"
        )
    model.zero_grad()
    T.backward(combined)
    T.adam_step(model.params, adam)
    return StepMetrics(
        step=0,
        epoch=0,
        losses={t: float(v.data) for t, v in losses.items()},
        accs=accs,
        combined=float(combined.data),
    )


# ---------------------------------------------------------------------------
# batch scheduling
# ---------------------------------------------------------------------------

def _example_len(ex: TaskExample) -> int:
    if ex.task == "QUE":
        starts = list(ex.marker_positions) + [len(ex.token_ids)]
        return max(b - a for a, b in zip(starts, starts[1:]))
    return len(ex.token_ids)


def _batches(
    examples: list[TaskExample], size: int, rng: np.random.Generator
) -> list[list[TaskExample]]:
    """Length-bucketed batches in rng-shuffled order (less padding waste)."""
    perm = rng.permutation(len(examples))
    shuffled = [examples[i] for i in perm]
    shuffled.sort(key=_example_len)  # stable: rng order survives within a length
    batches = [shuffled[i : i + size] for i in range(0, len(shuffled), size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def build_epoch_schedule(
    corpus: Corpus,
    qa_examples: list[TaskExample],
    cfg: TrainConfig,
    gen_cfg: GenConfig,
    vocab: Vocab,
    epoch: int,
) -> list[list[TaskExample]]:
    """Deterministic batch sequence for one epoch."""
    per_task: dict[str, list[TaskExample]] = {}
    if "QA" in cfg.enabled_tasks:
        per_task["QA"] = list(qa_examples)
    aux_tasks = [t for t in cfg.enabled_tasks if t != "QA"]
    if aux_tasks:
        aux_seed = stable_hash(cfg.seed, "aux", 0 if cfg.freeze_aux else epoch)
        mix = {t: len(corpus.dialogues) * cfg.aux_per_dialogue for t in aux_tasks}
        aux, _ = generate_dataset(corpus, gen_cfg, mix, vocab, seed=aux_seed)
        for ex in aux:
            per_task.setdefault(ex.task, []).append(ex)

    queues: dict[str, list[list[TaskExample]]] = {}
    for task, examples in per_task.items():
        rng = derived_rng(cfg.seed, "order", epoch, task)
        queues[task] = _batches(examples, cfg.batch_size, rng)

    ratio = cfg.mix_ratio or {}
    schedule: list[list[TaskExample]] = []
    task_cycle = [t for t in TASKS if t in queues]
    while any(queues.values()):
        for task in task_cycle:
            for _ in range(max(1, ratio.get(task, 1))):
                if queues[task]:
                    schedule.append(queues[task].pop(0))
    return schedule


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    gen_config: GenConfig
    vocab_hash: str
    step: int
    epoch: int
    step_in_epoch: int
    params: dict[str, np.ndarray]
    adam: T.AdamState


def save_checkpoint(
    path: str | Path,
    model: Model,
    adam: T.AdamState,
    train_cfg: TrainConfig,
    gen_cfg: GenConfig,
    vocab_hash: str,
    step: int,
    epoch: int,
    step_in_epoch: int,
) -> None:
    """Single binary file: magic, JSON header, little-endian float64 blob."""
    entries = []
    blobs = []
    offset = 0

    def push(kind: str, name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.params.items():
        push("param", name, p.data)
    for name in model.params:
        push("adam_m", name, adam.m.get(name, np.zeros_like(model.params[name].data)))
        push("adam_v", name, adam.v.get(name, np.zeros_like(model.params[name].data)))

    header = {
        "format_version": 1,
        "model_config": asdict(model.config),
        "train_config": asdict(train_cfg),
        "gen_config": asdict(gen_cfg),
        "vocab_hash": vocab_hash,
        "step": step,
        "epoch": epoch,
        "step_in_epoch": step_in_epoch,
        "adam": {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step": adam.step,
        },
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    body = raw[16 + header_len :]

    arrays: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arrays[(entry["kind"], entry["name"])] = arr.reshape(shape).astype(np.float64)

    tc = header["train_config"]
    tc["enabled_tasks"] = tuple(tc["enabled_tasks"])
    if tc.get("mix_ratio") is not None:
        tc["mix_ratio"] = dict(tc["mix_ratio"])
    adam_h = header["adam"]
    adam = T.AdamState(
        lr=adam_h["lr"], beta1=adam_h["beta1"], beta2=adam_h["beta2"],
        eps=adam_h["eps"], step=adam_h["step"],
    )
    params = {}
    for (kind, name), arr in arrays.items():
        if kind == "param":
            params[name] = arr
        elif kind == "adam_m":
            adam.m[name] = arr
        elif kind == "adam_v":
            adam.v[name] = arr
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig(**tc),
        gen_config=GenConfig(**header["gen_config"]),
        vocab_hash=header["vocab_hash"],
        step=header["step"],
        epoch=header["epoch"],
        step_in_epoch=header["step_in_epoch"],
        params=params,
        adam=adam,
    )


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    vocab: Vocab
    adam: T.AdamState
    metrics: list[dict] = field(default_factory=list)
    steps: int = 0


def run_training(
    corpus: Corpus,
    train_cfg: TrainConfig,
    gen_cfg: GenConfig,
    model_cfg: Optional[ModelConfig] = None,
    vocab: Optional[Vocab] = None,
    dev_corpus: Optional[Corpus] = None,
    log_path: Optional[str | Path] = None,
    checkpoint_path: Optional[str | Path] = None,
    resume_from: Optional[str | Path] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Train over the corpus; returns the model plus the metrics log.

    Deterministic given (corpus, configs): batch order, auxiliary examples,
    and initialization all derive from the config seeds.
    """
    if vocab is None:
        vocab = build_vocab(corpus)
    if model_cfg is None:
        model_cfg = ModelConfig(
            vocab_size=len(vocab), max_len=gen_cfg.max_len, seed=train_cfg.seed
        )
    model = Model(model_cfg)
    adam = T.AdamState(lr=train_cfg.lr)
    start_epoch, start_step_in_epoch, global_step = 0, 0, 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.vocab_hash != vocab.content_hash:
            raise ValueError("checkpoint vocabulary does not match the supplied vocab")
        model.load_state_arrays(ckpt.params)
        adam = ckpt.adam
        start_epoch, start_step_in_epoch = ckpt.epoch, ckpt.step_in_epoch
        global_step = ckpt.step

    qa_mix = {"QA": sum(len(d.turns) for d in corpus.dialogues)}
    qa_examples, qa_skips = generate_dataset(corpus, gen_cfg, qa_mix, vocab)

    metrics: list[dict] = []

    def log(rec: dict) -> None:
        metrics.append(rec)

    if qa_skips:
        log({"step": global_step, "epoch": start_epoch, "task": "qa_skips", **qa_skips})

    stop = False
    epoch, step_in_epoch = start_epoch, start_step_in_epoch
    for epoch in range(start_epoch, train_cfg.epochs):
        schedule = build_epoch_schedule(
            corpus, qa_examples, train_cfg, gen_cfg, vocab, epoch
        )
        first = start_step_in_epoch if epoch == start_epoch else 0
        epoch_losses: dict[str, list[float]] = {}
        epoch_accs: dict[str, list[float]] = {}
        step_in_epoch = first
        for batch in schedule[first:]:
            sm = train_step(model, batch, adam)
            global_step += 1
            step_in_epoch += 1
            for task, value in sm.losses.items():
                log(
                    {
                        "step": global_step,
                        "epoch": epoch,
                        "task": task,
                        "loss": value,
                        "acc": sm.accs[task],
                    }
                )
                epoch_losses.setdefault(task, []).append(value)
                epoch_accs.setdefault(task, []).append(sm.accs[task])
            log(
                {
                    "step": global_step,
                    "epoch": epoch,
                    "task": "combined",
                    "loss": sm.combined,
                }
            )
            if max_steps is not None and global_step >= max_steps:
                stop = True
                break

        summary = {
            "step": global_step,
            "epoch": epoch,
            "task": "epoch_summary",
            "mean_loss": {t: float(np.mean(v)) for t, v in epoch_losses.items()},
            "mean_acc": {t: float(np.mean(v)) for t, v in epoch_accs.items()},
        }
        if dev_corpus is not None and not stop:
            from .evaluator import evaluate  # local import; evaluator also drives training

            report = evaluate(model, dev_corpus, gen_cfg.m, vocab, gen_cfg)
            summary["dev_em"] = report.overall_em
            summary["dev_f1"] = report.overall_f1
        log(summary)
        if stop:
            break

    if log_path is not None:
        Path(log_path).write_text(
            "\n".join(json.dumps(r, sort_keys=True) for r in metrics) + "\n",
            encoding="utf-8",
        )
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            model,
            adam,
            train_cfg,
            gen_cfg,
            vocab.content_hash,
            step=global_step,
            epoch=epoch,
            step_in_epoch=step_in_epoch,
        )
    return TrainResult(model=model, vocab=vocab, adam=adam, metrics=metrics, steps=global_step)
