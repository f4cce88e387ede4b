"""Command-line entry point: train, evaluate, bench, and an interactive
turn-by-turn tracking REPL.

Configuration layering is file < environment < flags (last writer wins).
The config file is JSON carrying any RunConfig field; its path comes from
``--config`` or the GSAT_CONFIG environment variable, and individual fields
can be overridden through ``GSAT_<FIELD>`` variables.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import Ontology, SystemAct, examples_from_dialogues, load_dataset, load_pretrained_embeddings, make_batches
from .errors import ConfigError, DataFormatError, GsatError
from .evaluation import (
    BeliefState,
    EvalReport,
    LatencyReport,
    accumulate_belief,
    benchmark_latency,
    evaluate_model,
)
from .model import GSAT, ModelConfig
from .training import TrainConfig, load_checkpoint, save_checkpoint, summarize_seed_metrics, train
from .data import Vocabulary

logger = logging.getLogger("gsat")

SPLIT_FILENAMES = {"train": "train", "dev": "validate", "test": "test"}


@dataclass
class RunConfig:
    """Merged view of model/training hyperparameters, paths and run options."""

    data: str | None = None
    ontology: str | None = None
    lang: str = "en"
    out: str | None = None
    checkpoint: str | None = None
    seed: int = 1
    seeds: str | None = None
    split: str = "test"
    batch_size: int = 50
    iters: int = 50
    mode: str = "both"
    embeddings: str | None = None
    embedding_dim: int = 128
    hidden_size: int = 64
    dropout: float = 0.2
    learning_rate: float = 0.001
    epochs: int = 60
    patience: int = 15
    threshold: float = 0.5
    grad_clip: float | None = None
    embeddings_trainable: bool = True

    def seed_list(self) -> list[int]:
        if not self.seeds:
            return [self.seed]
        text = self.seeds.strip()
        m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", text)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ConfigError(f"bad seed range {text!r}")
            return list(range(lo, hi + 1))
        try:
            return [int(s) for s in text.split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError(f"bad seeds value {text!r}") from e


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value):
    if value is None:
        return None
    kind = _FIELD_TYPES[name]
    if isinstance(value, str):
        if kind in ("int", "int | None"):
            return int(value)
        if kind in ("float", "float | None"):
            return float(value)
        if kind == "bool":
            return value.lower() in ("1", "true", "yes", "on")
    return value


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    config_path = getattr(args, "config", None) or os.environ.get("GSAT_CONFIG")
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            file_values = json.load(f)
        unknown = set(file_values) - set(_FIELD_TYPES)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for name in _FIELD_TYPES:
        env = os.environ.get(f"GSAT_{name.upper()}")
        if env is not None:
            values[name] = env
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def resolve_split_path(cfg: RunConfig, split: str) -> Path:
    if not cfg.data:
        raise ConfigError("--data is required")
    p = Path(cfg.data)
    if p.is_file():
        return p
    for stem in (SPLIT_FILENAMES[split], split):
        candidate = p / f"woz_{stem}_{cfg.lang}.json"
        if candidate.exists():
            return candidate
    raise ConfigError(f"no {split} split for language {cfg.lang!r} under {p}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    if not cfg.ontology:
        raise ConfigError("--ontology is required")
    if not cfg.out:
        raise ConfigError("--out is required")
    if not Path(cfg.ontology).exists():
        raise ConfigError(f"ontology file not found: {cfg.ontology}")
    train_path = resolve_split_path(cfg, "train")
    dev_path = resolve_split_path(cfg, "dev")
    try:
        test_path = resolve_split_path(cfg, "test")
    except ConfigError:
        test_path = None
    if cfg.embeddings and not Path(cfg.embeddings).exists():
        raise ConfigError(f"embeddings file not found: {cfg.embeddings}")

    ontology = Ontology.load(cfg.ontology)
    train_dialogues = load_dataset(train_path, ontology, split="train")
    dev_dialogues = load_dataset(dev_path, ontology, split="dev")
    test_dialogues = load_dataset(test_path, ontology, split="test") if test_path else None
    vocab = Vocabulary.build(train_dialogues, ontology)
    logger.info("vocabulary: %d tokens", len(vocab))

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for seed in cfg.seed_list():
        model_config = ModelConfig(
            vocab_size=len(vocab),
            embedding_dim=cfg.embedding_dim,
            hidden_size=cfg.hidden_size,
            dropout=cfg.dropout,
            embeddings_trainable=cfg.embeddings_trainable,
            init_seed=seed,
        )
        model = GSAT(model_config, ontology, vocab)
        if cfg.embeddings:
            matrix, coverage = load_pretrained_embeddings(
                cfg.embeddings, vocab, cfg.embedding_dim, np.random.default_rng(seed)
            )
            model.set_embeddings(matrix)
            logger.info("seed %d: embedding coverage %.1f%%", seed, 100 * coverage)
        train_config = TrainConfig(
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            max_epochs=cfg.epochs,
            patience=cfg.patience,
            seed=seed,
            grad_clip=cfg.grad_clip,
        )
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        result = train(model, train_dialogues, dev_dialogues, train_config,
                       log_path=seed_dir / "train_log.jsonl")

        metrics = {
            "seed": seed,
            "best_epoch": result.best_epoch,
            "dev_joint_goal": result.best_dev_joint_goal,
        }
        dev_report = evaluate_model(model, dev_dialogues, cfg.batch_size, cfg.threshold)
        metrics["dev_turn_request"] = dev_report.turn_request
        if test_dialogues:
            test_report = evaluate_model(model, test_dialogues, cfg.batch_size, cfg.threshold)
            metrics["test_joint_goal"] = test_report.joint_goal
            metrics["test_turn_request"] = test_report.turn_request
        save_checkpoint(model, seed_dir / "model.ckpt", metrics=metrics)
        per_seed.append(metrics)
        print(json.dumps(metrics))

    summary = {"per_seed": per_seed, "summary": summarize_seed_metrics(per_seed)}
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary["summary"]))
    return 0


def _format_report(report: EvalReport) -> str:
    lines = [
        f"{'metric':<24}{'value':>10}",
        f"{'joint goal':<24}{report.joint_goal:>10.4f}",
        f"{'turn request':<24}{report.turn_request:>10.4f}",
    ]
    for slot, acc in report.per_slot.items():
        lines.append(f"{'slot ' + slot:<24}{acc:>10.4f}")
    lines.append(f"{'turns':<24}{report.n_turns:>10d}")
    return "\n".join(lines)


def cmd_evaluate(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    if cfg.split not in ("dev", "test", "train"):
        raise ConfigError(f"unknown split {cfg.split!r}")
    model, _ = load_checkpoint(cfg.checkpoint)
    if cfg.ontology:
        if Ontology.load(cfg.ontology) != model.ontology:
            raise ConfigError("ontology file disagrees with the checkpoint's ontology")
    dialogues = load_dataset(resolve_split_path(cfg, cfg.split), model.ontology, split=cfg.split)
    report = evaluate_model(model, dialogues, cfg.batch_size, cfg.threshold)
    print(report.to_json())
    print(_format_report(report))
    return 0


def synthetic_batches(model: GSAT, batch_size: int, n_batches: int = 10,
                      length: int = 20, seed: int = 0) -> list:
    """Deterministic random-token batches for benchmarking without a corpus."""
    rng = np.random.default_rng(seed)
    from .data import Turn, TurnExample

    examples = []
    for i in range(batch_size * n_batches):
        ids = rng.integers(2, len(model.vocab), size=length).tolist()
        turn = Turn([], "", {}, set(), {})
        examples.append(TurnExample(0, i, turn, ids))
    return make_batches(examples, model.ontology, batch_size)


def _format_latency(report: LatencyReport) -> str:
    lines = [f"batch size {report.batch_size}, {report.iterations} iterations, {report.hardware}"]
    for mode in ("train", "predict"):
        timing = getattr(report, mode)
        if timing:
            lines.append(f"{mode:<8} {timing.mean * 1000:9.2f} ms/batch  (sd {timing.sd * 1000:.2f} ms)")
    return "\n".join(lines)


def cmd_bench(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, _ = load_checkpoint(cfg.checkpoint)
    if cfg.data:
        dialogues = load_dataset(resolve_split_path(cfg, cfg.split), model.ontology, split=cfg.split)
        examples = examples_from_dialogues(dialogues, model.vocab)
        batches = make_batches(examples, model.ontology, cfg.batch_size)
        batches = [b for b in batches if b.size == cfg.batch_size] or batches
    else:
        batches = synthetic_batches(model, cfg.batch_size, seed=cfg.seed)
    report = benchmark_latency(model, batches, mode=cfg.mode, iters=cfg.iters)
    print(report.to_json())
    print(_format_latency(report))
    return 0


# ---------------------------------------------------------------------------
# tracking REPL
# ---------------------------------------------------------------------------

_ACT_RE = re.compile(r"([^()\s][^()]*?)\s*\(([^()]*)\)")


def parse_action_line(line: str) -> list[SystemAct] | None:
    """Parse ``act(slot=value, ...)`` notation into system acts.

    Returns None when the line is non-empty but unparseable.
    """
    line = line.strip()
    if not line:
        return []
    acts: list[SystemAct] = []
    matched = 0
    for m in _ACT_RE.finditer(line):
        matched += 1
        act_type = m.group(1).strip()
        body = m.group(2).strip()
        if not body:
            acts.append(SystemAct(act_type))
            continue
        for item in body.split(","):
            item = item.strip()
            if not item:
                continue
            if "=" in item:
                slot, value = item.split("=", 1)
                acts.append(SystemAct(act_type, slot.strip(), value.strip()))
            else:
                acts.append(SystemAct(act_type, item))
    if matched == 0:
        return None
    return acts


def _print_state(state: BeliefState, pred, ontology: Ontology, threshold: float,
                 out=sys.stdout) -> None:
    goals = ", ".join(
        f"{slot}={state.goals[slot] or 'none'}" for slot in ontology.informable_slots
    )
    requested = [
        f"{r} ({p:.2f})"
        for r, p in zip(ontology.requestable, pred.requests)
        if p >= threshold
    ]
    print(f"  goals: {goals}", file=out)
    print(f"  requests: {', '.join(requested) if requested else '(none)'}", file=out)


def cmd_track(cfg: RunConfig, stdin=None, stdout=None) -> int:
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    model, _ = load_checkpoint(cfg.checkpoint)
    ontology = model.ontology
    state = BeliefState.initial(ontology)
    turn_no = 0
    print("interactive tracker; ':reset' clears state, ':quit' exits", file=stdout)

    def read(prompt: str) -> str | None:
        print(prompt, end="", file=stdout, flush=True)
        line = stdin.readline()
        return None if line == "" else line.rstrip("\n")

    while True:
        sys_line = read("system> ")
        if sys_line is None or sys_line.strip() == ":quit":
            return 0
        if sys_line.strip() == ":reset":
            state = BeliefState.initial(ontology)
            turn_no = 0
            print("state reset", file=stdout)
            continue
        user_line = read("user> ")
        if user_line is None or user_line.strip() == ":quit":
            return 0
        if user_line.strip() == ":reset":
            state = BeliefState.initial(ontology)
            turn_no = 0
            print("state reset", file=stdout)
            continue
        if not user_line.strip():
            continue
        acts = parse_action_line(sys_line)
        if acts is None:
            print("warning: could not parse system action, treating as empty", file=stdout)
            acts = []
        pred = model.predict_turn(acts, user_line)
        state = accumulate_belief(state, pred, ontology, cfg.threshold)
        turn_no += 1
        print(f"turn {turn_no}:", file=stdout)
        _print_state(state, pred, ontology, cfg.threshold, out=stdout)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (or set GSAT_CONFIG)")
    p.add_argument("--lang", choices=["en", "it", "de"], default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per seed and summarize")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset directory (woz_*_<lang>.json)")
    p.add_argument("--ontology", default=None)
    p.add_argument("--out", default=None, help="output directory for checkpoints and logs")
    p.add_argument("--seeds", default=None, help="e.g. '1..10' or '1,2,3'")
    p.add_argument("--embeddings", default=None, help="pre-trained vector file")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int, default=None)
    p.add_argument("--hidden-size", dest="hidden_size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=None)
    p.add_argument("--freeze-embeddings", dest="embeddings_trainable",
                   action="store_false", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--ontology", default=None, help="optional cross-check against the checkpoint")
    p.add_argument("--split", choices=["dev", "test", "train"], default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench", help="seconds-per-batch latency benchmark")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="optional corpus for realistic batches")
    p.add_argument("--split", choices=["dev", "test", "train"], default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--mode", choices=["train", "predict", "both"], default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("track", help="interactive turn-by-turn tracking REPL")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(fn=cmd_track)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_run_config(args)
        return args.fn(cfg)
    except (ConfigError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GsatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
