"""Command-line entry point: the full pipeline as subcommands.

Subcommands: make-synthetic, build-vocab, corrupt, gen-tasks, train, eval,
gradcheck, ablate, sweep-history, sweep-turns. Every command writes a
manifest next to its outputs (config, seeds, content hashes) and leaves its
inputs untouched. Exit codes: 0 ok, 2 bad flags, 3 missing file,
4 validation failure, 5 threshold/check violation.
"""

from __future__ import annotations

import os

# Single-threaded BLAS keeps float64 training runs bit-reproducible.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .asrnoise import NoiseConfig, corrupt_corpus, load_confusion_table
from .corpus import CorpusError, load_corpus, save_corpus
from .evaluator import (
    ABLATION_SUBSETS,
    ablation_markdown,
    evaluate,
    history_markdown,
    run_ablation,
    sweep_history,
    sweep_turns,
    turns_markdown,
)
from .model import Model, ModelConfig
from .synthetic import make_synthetic
from .taskgen import GenConfig, GenerationError, generate_dataset, write_examples
from .tensor import grad_check, tune_allocator

tune_allocator()
from .tokenizer import TokenizerError, build_vocab, load_vocab, save_vocab
from .trainer import TrainConfig, load_checkpoint, run_training

EXIT_MISSING_FILE = 3
EXIT_VALIDATION = 4
EXIT_THRESHOLD = 5


def load_config_file(path: Path) -> dict:
    """Flat TOML-style config: `key = value` with JSON-compatible values."""
    config: dict = {}
    prefix = ""
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip() + "."
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected `key = value`")
        try:
            config[prefix + key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{lineno}: bad value {value.strip()!r}") from e
    return config


class Run:
    """Resolved settings for one subcommand: flags override the config file."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.workdir = Path(getattr(args, "workdir", ".") or ".")
        self.config = {}
        if getattr(args, "config", None):
            self.config = load_config_file(self.path(args.config))
        self.used: dict = {}

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def get(self, key: str, default=None):
        flag = getattr(self.args, key.replace("-", "_"), None)
        value = flag if flag is not None else self.config.get(key, default)
        self.used[key] = value
        return value

    def manifest(self, out: Path, inputs: list[Path], outputs: list[Path]) -> None:
        def digest(p: Path) -> str:
            return hashlib.sha256(p.read_bytes()).hexdigest()

        doc = {
            "command": self.args.command,
            "config": {k: v for k, v in sorted(self.used.items())},
            "inputs": {str(p): digest(p) for p in inputs},
            "outputs": {str(p): digest(p) for p in outputs},
        }
        out.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def _gen_config(run: Run) -> GenConfig:
    return GenConfig(
        k=int(run.get("k", 9)),
        m=int(run.get("m", 2)),
        max_len=int(run.get("max-len", 128)),
        seed=int(run.get("seed", 0)),
    )


def _train_config(run: Run) -> TrainConfig:
    tasks = run.get("tasks", "QA,INC,INS,QUE")
    if isinstance(tasks, str):
        tasks = tuple(t.strip() for t in tasks.split(",") if t.strip())
    return TrainConfig(
        enabled_tasks=tuple(tasks),
        epochs=int(run.get("epochs", 6)),
        batch_size=int(run.get("batch-size", 4)),
        lr=float(run.get("lr", 3e-5)),
        seed=int(run.get("seed", 0)),
        freeze_aux=bool(run.get("freeze-aux", False)),
    )


def _model_config(run: Run, vocab_size: int, max_len: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        layers=int(run.get("layers", 2)),
        hidden=int(run.get("hidden", 64)),
        heads=int(run.get("heads", 4)),
        max_len=max_len,
        seed=int(run.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(run: Run) -> int:
    out = run.path(run.get("out", "synthetic.json"))
    corpus = make_synthetic(
        n_dialogues=int(run.get("dialogues", 200)),
        n_turns=int(run.get("turns", 10)),
        seed=int(run.get("seed", 0)),
        split=run.get("split", "train"),
    )
    save_corpus(corpus, out)
    run.manifest(out.with_suffix(".manifest.json"), [], [out])
    print(f"wrote {len(corpus)} dialogues -> {out}")
    return 0


def cmd_build_vocab(run: Run) -> int:
    corpus_path = run.path(run.get("corpus"))
    out = run.path(run.get("out", "vocab.txt"))
    corpus = load_corpus(corpus_path)
    vocab = build_vocab(
        corpus,
        min_freq=int(run.get("min-freq", 1)),
        max_size=int(run.get("max-size", 50000)),
    )
    save_vocab(vocab, out)
    run.manifest(out.with_suffix(".manifest.json"), [corpus_path], [out])
    print(f"vocab of {len(vocab)} tokens -> {out}")
    return 0


def cmd_corrupt(run: Run) -> int:
    src = run.path(run.get("in"))
    out = run.path(run.get("out", "corpus_noisy.json"))
    table = None
    if run.get("confusion"):
        table = load_confusion_table(run.path(run.get("confusion")))
    cfg = NoiseConfig(
        target_wer=float(run.get("wer", 0.187)),
        sub_weight=float(run.get("sub-weight", 0.7)),
        del_weight=float(run.get("del-weight", 0.15)),
        ins_weight=float(run.get("ins-weight", 0.15)),
        seed=int(run.get("seed", 0)),
        confusion_table=table,
    )
    corpus = load_corpus(src)
    noisy = corrupt_corpus(
        corpus,
        cfg,
        corrupt_passages=not bool(run.get("skip-passages", False)),
        corrupt_questions=not bool(run.get("skip-questions", False)),
    )
    save_corpus(noisy, out)
    run.manifest(out.with_suffix(".manifest.json"), [src], [out])
    print(f"corrupted corpus at target WER {cfg.target_wer} -> {out}")
    return 0


def cmd_gen_tasks(run: Run) -> int:
    corpus_path = run.path(run.get("corpus"))
    vocab_path = run.path(run.get("vocab"))
    out = run.path(run.get("out", "tasks.jsonl"))
    corpus = load_corpus(corpus_path)
    vocab = load_vocab(vocab_path)
    cfg = _gen_config(run)
    n_turns = sum(len(d.turns) for d in corpus.dialogues)
    qa = int(run.get("qa-count", -1))
    mix = {
        "QA": n_turns if qa < 0 else qa,
        "INC": int(run.get("inc-count", len(corpus))),
        "INS": int(run.get("ins-count", len(corpus))),
        "QUE": int(run.get("que-count", len(corpus))),
    }
    examples, skips = generate_dataset(corpus, cfg, mix, vocab)
    write_examples(out, examples, cfg, mix, skips)
    run.manifest(
        out.with_suffix(".cli-manifest.json"), [corpus_path, vocab_path], [out]
    )
    print(f"{len(examples)} examples ({skips or 'no skips'}) -> {out}")
    return 0


def cmd_train(run: Run) -> int:
    corpus_path = run.path(run.get("corpus"))
    out_dir = run.path(run.get("out-dir", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(corpus_path)
    dev_corpus = None
    inputs = [corpus_path]
    if run.get("dev"):
        dev_path = run.path(run.get("dev"))
        dev_corpus = load_corpus(dev_path, split="test")
        inputs.append(dev_path)
    if run.get("vocab"):
        vocab = load_vocab(run.path(run.get("vocab")))
    else:
        vocab = build_vocab(corpus)
    gen_cfg = _gen_config(run)
    train_cfg = _train_config(run)
    model_cfg = _model_config(run, len(vocab), gen_cfg.max_len)
    max_steps = run.get("max-steps")
    ckpt = out_dir / "checkpoint.bin"
    log = out_dir / "metrics.jsonl"
    result = run_training(
        corpus,
        train_cfg,
        gen_cfg,
        model_cfg=model_cfg,
        vocab=vocab,
        dev_corpus=dev_corpus,
        log_path=log,
        checkpoint_path=ckpt,
        resume_from=run.path(run.get("resume")) if run.get("resume") else None,
        max_steps=int(max_steps) if max_steps is not None else None,
    )
    vocab_file = out_dir / "vocab.txt"
    save_vocab(vocab, vocab_file)
    run.manifest(out_dir / "manifest.json", inputs, [ckpt, log, vocab_file])
    print(f"trained {result.steps} steps -> {ckpt}")
    return 0


def _load_model(run: Run, ckpt_path: Path) -> tuple[Model, "GenConfig", object]:
    ckpt = load_checkpoint(ckpt_path)
    model = Model(ckpt.model_config)
    model.load_state_arrays(ckpt.params)
    return model, ckpt.gen_config, ckpt


def cmd_eval(run: Run) -> int:
    ckpt_path = run.path(run.get("checkpoint"))
    corpus_path = run.path(run.get("corpus"))
    vocab = load_vocab(run.path(run.get("vocab")))
    out = run.path(run.get("out", "report.json"))
    model, gen_cfg, ckpt = _load_model(run, ckpt_path)
    if vocab.content_hash != ckpt.vocab_hash:
        raise CorpusError("vocabulary does not match the checkpoint")
    corpus = load_corpus(corpus_path, split="test")
    m = int(run.get("m", gen_cfg.m))
    report = evaluate(model, corpus, m, vocab, gen_cfg, warn=lambda s: print(s, file=sys.stderr))
    out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    run.manifest(out.with_suffix(".manifest.json"), [ckpt_path, corpus_path], [out])
    print(
        f"EM {report.overall_em:.4f}  F1 {report.overall_f1:.4f}  "
        f"aux {report.aux_acc}"
    )
    min_em, min_f1 = run.get("min-em"), run.get("min-f1")
    if min_em is not None and report.overall_em < float(min_em):
        print(f"EM {report.overall_em:.4f} below threshold {min_em}", file=sys.stderr)
        return EXIT_THRESHOLD
    if min_f1 is not None and report.overall_f1 < float(min_f1):
        print(f"F1 {report.overall_f1:.4f} below threshold {min_f1}", file=sys.stderr)
        return EXIT_THRESHOLD
    return 0


def cmd_gradcheck(run: Run) -> int:
    from .model import task_loss

    corpus = make_synthetic(n_dialogues=4, n_turns=4, seed=int(run.get("seed", 0)))
    vocab = build_vocab(corpus)
    gen_cfg = GenConfig(k=3, m=1, max_len=128, seed=int(run.get("seed", 0)))
    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        layers=int(run.get("layers", 2)),
        hidden=int(run.get("hidden", 32)),
        heads=int(run.get("heads", 2)),
        max_len=128,
        init_std=0.1,
        seed=int(run.get("seed", 0)),
    )
    model = Model(model_cfg)
    # Zero-init heads block all gradient flow; nudge them so the check bites.
    rng_probe = np.random.Generator(np.random.PCG64(7))
    for name, p in model.params.items():
        if name.startswith("head."):
            p.data = rng_probe.normal(0.0, 0.5, size=p.data.shape)
    mix = {"QA": 2, "INC": 1, "INS": 1, "QUE": 1}
    batch, _ = generate_dataset(corpus, gen_cfg, mix, vocab)

    def loss_fn():
        total = None
        for ex in batch:
            loss, _ = task_loss(model, ex)
            total = loss if total is None else total + loss
        return total

    report = grad_check(
        loss_fn,
        model.params,
        h=float(run.get("h", 1e-5)),
        tol=float(run.get("tol", 1e-6)),
        samples_per_group=int(run.get("samples", 200)),
        seed=int(run.get("seed", 0)),
        corrupt_scale=float(run.get("corrupt-scale", 1.0)),
    )
    print(report.summary())
    return 0 if report.passed else EXIT_THRESHOLD


def cmd_ablate(run: Run) -> int:
    corpus = load_corpus(run.path(run.get("corpus")))
    dev = load_corpus(run.path(run.get("dev")), split="test")
    out_dir = run.path(run.get("out-dir", "ablation"))
    out_dir.mkdir(parents=True, exist_ok=True)
    n_seeds = int(run.get("seeds", 3))
    rows = run_ablation(
        corpus,
        dev,
        _train_config(run),
        _gen_config(run),
        seeds=tuple(range(n_seeds)),
        subsets=ABLATION_SUBSETS,
    )
    table = ablation_markdown(rows)
    (out_dir / "ablation.md").write_text(table + "\n", encoding="utf-8")
    (out_dir / "ablation.json").write_text(
        json.dumps(
            [
                {
                    "label": r.label,
                    "enabled_tasks": list(r.enabled_tasks),
                    "mean_em": r.mean_em,
                    "mean_f1": r.mean_f1,
                    "spread_f1": r.spread_f1,
                    "reports": [rep.to_dict() for rep in r.seed_reports],
                }
                for r in rows
            ],
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    run.manifest(
        out_dir / "manifest.json", [], [out_dir / "ablation.md", out_dir / "ablation.json"]
    )
    print(table)
    return 0


def cmd_sweep_history(run: Run) -> int:
    corpus = load_corpus(run.path(run.get("corpus")))
    dev = load_corpus(run.path(run.get("dev")), split="test")
    out_dir = run.path(run.get("out-dir", "sweep_history"))
    out_dir.mkdir(parents=True, exist_ok=True)
    m_values = run.get("m-values", "0,1,2,3,4")
    if isinstance(m_values, str):
        m_values = [int(x) for x in m_values.split(",")]
    n_seeds = int(run.get("seeds", 1))
    rows = sweep_history(
        corpus, dev, _train_config(run), _gen_config(run),
        m_values=m_values, seeds=tuple(range(n_seeds)),
    )
    table = history_markdown(rows)
    (out_dir / "history.md").write_text(table + "\n", encoding="utf-8")
    (out_dir / "history.json").write_text(json.dumps(rows, indent=1), encoding="utf-8")
    run.manifest(out_dir / "manifest.json", [], [out_dir / "history.md", out_dir / "history.json"])
    print(table)
    return 0


def cmd_sweep_turns(run: Run) -> int:
    corpus = load_corpus(run.path(run.get("corpus")))
    dev = load_corpus(run.path(run.get("dev")), split="test")
    out_dir = run.path(run.get("out-dir", "sweep_turns"))
    out_dir.mkdir(parents=True, exist_ok=True)
    caps = run.get("turn-caps", "2,4,8")
    if isinstance(caps, str):
        caps = [int(x) for x in caps.split(",")]
    n_seeds = int(run.get("seeds", 1))
    rows = sweep_turns(
        corpus, dev, _train_config(run), _gen_config(run),
        turn_caps=caps, seeds=tuple(range(n_seeds)),
    )
    table = turns_markdown(rows)
    (out_dir / "turns.md").write_text(table + "\n", encoding="utf-8")
    (out_dir / "turns.json").write_text(json.dumps(rows, indent=1), encoding="utf-8")
    run.manifest(out_dir / "manifest.json", [], [out_dir / "turns.md", out_dir / "turns.json"])
    print(table)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scqa",
        description="Self-supervised dialogue learning pipeline for spoken conversational QA.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        p = sub.add_parser(name)
        p.add_argument("--workdir", default=".", help="base directory for relative paths")
        p.add_argument("--config", help="flat TOML-style config file (flags win)")
        p.add_argument("--seed", type=int)
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("make-synthetic", cmd_make_synthetic, {
        "--out": {}, "--dialogues": {"type": int}, "--turns": {"type": int},
        "--split": {"choices": ["train", "test"]},
    })
    add("build-vocab", cmd_build_vocab, {
        "--corpus": {"required": True}, "--out": {},
        "--min-freq": {"type": int}, "--max-size": {"type": int},
    })
    add("corrupt", cmd_corrupt, {
        "--in": {"required": True, "dest": "in"}, "--out": {},
        "--wer": {"type": float}, "--confusion": {},
        "--sub-weight": {"type": float}, "--del-weight": {"type": float},
        "--ins-weight": {"type": float},
        "--skip-passages": {"action": "store_true", "default": None},
        "--skip-questions": {"action": "store_true", "default": None},
    })
    add("gen-tasks", cmd_gen_tasks, {
        "--corpus": {"required": True}, "--vocab": {"required": True}, "--out": {},
        "--k": {"type": int}, "--m": {"type": int}, "--max-len": {"type": int},
        "--qa-count": {"type": int}, "--inc-count": {"type": int},
        "--ins-count": {"type": int}, "--que-count": {"type": int},
    })
    add("train", cmd_train, {
        "--corpus": {"required": True}, "--dev": {}, "--vocab": {}, "--out-dir": {},
        "--tasks": {}, "--epochs": {"type": int}, "--batch-size": {"type": int},
        "--lr": {"type": float}, "--k": {"type": int}, "--m": {"type": int},
        "--max-len": {"type": int}, "--layers": {"type": int}, "--hidden": {"type": int},
        "--heads": {"type": int}, "--max-steps": {"type": int}, "--resume": {},
        "--freeze-aux": {"action": "store_true", "default": None},
    })
    add("eval", cmd_eval, {
        "--checkpoint": {"required": True}, "--corpus": {"required": True},
        "--vocab": {"required": True}, "--out": {}, "--m": {"type": int},
        "--min-em": {"type": float}, "--min-f1": {"type": float},
    })
    add("gradcheck", cmd_gradcheck, {
        "--layers": {"type": int}, "--hidden": {"type": int}, "--heads": {"type": int},
        "--h": {"type": float}, "--tol": {"type": float}, "--samples": {"type": int},
        "--corrupt-scale": {"type": float},
    })
    add("ablate", cmd_ablate, {
        "--corpus": {"required": True}, "--dev": {"required": True}, "--out-dir": {},
        "--seeds": {"type": int}, "--epochs": {"type": int}, "--batch-size": {"type": int},
        "--lr": {"type": float}, "--k": {"type": int}, "--m": {"type": int},
        "--max-len": {"type": int},
    })
    add("sweep-history", cmd_sweep_history, {
        "--corpus": {"required": True}, "--dev": {"required": True}, "--out-dir": {},
        "--m-values": {}, "--seeds": {"type": int}, "--epochs": {"type": int},
        "--batch-size": {"type": int}, "--lr": {"type": float}, "--k": {"type": int},
        "--max-len": {"type": int},
    })
    add("sweep-turns", cmd_sweep_turns, {
        "--corpus": {"required": True}, "--dev": {"required": True}, "--out-dir": {},
        "--turn-caps": {}, "--seeds": {"type": int}, "--epochs": {"type": int},
        "--batch-size": {"type": int}, "--lr": {"type": float}, "--k": {"type": int},
        "--m": {"type": int}, "--max-len": {"type": int},
    })
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = Run(args)
    try:
        return args.fn(run)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (CorpusError, TokenizerError, GenerationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
