"""Loss, Adam optimization, the epoch loop with dev-based selection, and
checkpoint persistence.

The loss is the unweighted sum of a cross-entropy per informable slot (gold
index 0 = "none" when the slot is not mentioned this turn) and a binary
cross-entropy per requestable slot, averaged over the batch.  Model selection
keeps the checkpoint with the best dev joint goal, earlier epoch on ties.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dialogue, Ontology, Vocabulary, examples_from_dialogues, make_batches
from .errors import CheckpointError, ConfigError, NonFiniteGradientError
from .model import GSAT, Batch, BatchPrediction, ModelConfig

logger = logging.getLogger(__name__)

_MAGIC = b"GSATCKP1"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 50
    max_epochs: int = 60
    patience: int = 15
    seed: int = 0
    grad_clip: float | None = None  # off by default; LSTMs can spike

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
        }


def turn_loss(prediction: BatchPrediction, batch: Batch) -> Tensor:
    """Scalar batch loss on the prediction logits.

    Slots whose gold value fell outside the ontology are skipped through the
    per-row validity mask built at batching time.
    """
    total = None
    for slot in prediction.slots:
        idx, valid = batch.informable_labels[slot]
        ce = ag.cross_entropy_with_logits(prediction.informable_logits[slot], idx, valid)
        total = ce if total is None else ag.add(total, ce)
    bce = ag.binary_cross_entropy_with_logits(prediction.request_logits, batch.request_labels)
    total = ag.add(total, ag.tsum(bce, axis=1))
    return ag.mean(total)


class Adam:
    """Standard Adam with bias correction over a named parameter registry."""

    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = params  # OrderedDict[str, Tensor]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items() if p.requires_grad}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items() if p.requires_grad}

    def step(self) -> None:
        """Apply one update from the accumulated gradients, then clear them."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
            if self.grad_clip is not None:
                norm = float(np.sqrt((g * g).sum()))
                if norm > self.grad_clip:
                    g = g * (self.grad_clip / norm)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: GSAT, path: str | Path, metrics: dict | None = None) -> None:
    """Write config + vocabulary + ontology + parameters to a single file.

    Arrays are stored as little-endian float32 after a JSON header, so the
    file is identical across platforms and diffs cleanly at the header level.
    """
    arrays = model.parameter_arrays()
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "ontology": model.ontology.to_dict(),
        "vocab": model.vocab.tokens(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "metrics": metrics or {},
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[GSAT, dict]:
    """Rebuild a model from a checkpoint file; returns (model, saved metrics)."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a recognizable checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, len(_MAGIC))
    start = len(_MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if header.get("format_version") != 1:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    config = ModelConfig(**header["config"])
    ontology = Ontology.from_dict(header["ontology"])
    vocab = Vocabulary.from_tokens(header["vocab"])
    offset = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape))
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated array data for {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    model = GSAT(config, ontology, vocab)
    model.load_parameter_arrays(arrays)
    return model, header.get("metrics", {})


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_joint_goal: float
    dev_turn_request: float
    seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "dev_joint_goal": self.dev_joint_goal,
            "dev_turn_request": self.dev_turn_request,
            "seconds": self.seconds,
        }


@dataclass
class TrainResult:
    best_epoch: int
    best_dev_joint_goal: float
    best_state: dict = field(repr=False)
    history: list[EpochRecord] = field(default_factory=list)


def train(
    model: GSAT,
    train_dialogues: list[Dialogue],
    dev_dialogues: list[Dialogue],
    config: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Epoch loop: shuffle, batch, optimize; keep the best-dev parameters.

    All randomness (shuffling and dropout) flows from the single seed.  The
    best parameters are restored onto the model before returning.
    """
    from .evaluation import evaluate_model  # local import to avoid a cycle

    if not train_dialogues or not dev_dialogues:
        raise ConfigError("training requires non-empty train and dev splits")

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.params, lr=config.learning_rate, grad_clip=config.grad_clip)
    examples = examples_from_dialogues(train_dialogues, model.vocab)

    best_state = model.parameter_arrays()
    best_joint = -1.0
    best_epoch = 0
    since_best = 0
    history: list[EpochRecord] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            batches = make_batches(examples, model.ontology, config.batch_size, shuffle_rng=rng)
            losses = []
            for batch in batches:
                prediction = model.forward_batch(batch, training=True, rng=rng)
                loss = turn_loss(prediction, batch)
                ag.backward(loss)
                optimizer.step()
                losses.append(loss.item())
            report = evaluate_model(model, dev_dialogues, batch_size=config.batch_size)
            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                dev_joint_goal=report.joint_goal,
                dev_turn_request=report.turn_request,
                seconds=time.perf_counter() - t0,
            )
            history.append(record)
            logger.info(
                "epoch %d: loss %.4f, dev joint goal %.4f, dev turn request %.4f (%.1fs)",
                record.epoch, record.train_loss, record.dev_joint_goal,
                record.dev_turn_request, record.seconds,
            )
            if log_file:
                log_file.write(json.dumps(record.to_dict()) + "\n")
                log_file.flush()
            if record.dev_joint_goal > best_joint:
                best_joint = record.dev_joint_goal
                best_epoch = epoch
                best_state = model.parameter_arrays()
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    logger.info("stopping early after %d epochs without improvement", since_best)
                    break
    finally:
        if log_file:
            log_file.close()

    model.load_parameter_arrays(best_state)
    return TrainResult(best_epoch, best_joint, best_state, history)


def summarize_seed_metrics(per_seed: list[dict]) -> dict:
    """Mean and standard deviation of each numeric metric across seeds."""
    summary: dict = {"n_seeds": len(per_seed)}
    if not per_seed:
        return summary
    for key in per_seed[0]:
        values = [s[key] for s in per_seed if isinstance(s.get(key), (int, float))]
        if len(values) == len(per_seed):
            summary[key] = {
                "mean": float(np.mean(values)),
                "sd": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            }
    return summary
