"""Belief accumulation, the joint-goal / turn-request metrics, and the
per-batch latency benchmark.

A turn's joint goal is correct only when the accumulated predicted goals
match the gold accumulated goals exactly over every informable slot
(including the ones still at none).  Turn requests are exact set matches,
counting every turn, empty request sets included.
"""

from __future__ import annotations

import copy
import gc
import json
import platform
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .data import Batch, Dialogue, Ontology, examples_from_dialogues, make_batches
from .errors import ConfigError
from .model import GSAT, TurnPrediction
from .training import Adam, turn_loss


@dataclass
class BeliefState:
    """Accumulated goals (one entry per informable slot, None = unconstrained)
    plus the current turn's request set."""

    goals: dict[str, str | None]
    requests: set[str] = field(default_factory=set)

    @classmethod
    def initial(cls, ontology: Ontology) -> "BeliefState":
        return cls({slot: None for slot in ontology.informable_slots})


def accumulate_belief(
    previous: BeliefState,
    prediction: TurnPrediction,
    ontology: Ontology,
    threshold: float = 0.5,
) -> BeliefState:
    """Fold one turn's prediction into the running state.

    Each slot starts at none and is overwritten whenever a value wins the
    argmax (lowest index breaks ties, so "none" wins exact ties).  A "none"
    argmax keeps the previous value rather than erasing it.  Requests are
    per-turn only and never accumulate.
    """
    goals = dict(previous.goals)
    for slot in ontology.informable_slots:
        probs = prediction.informable[slot]
        j = int(np.argmax(probs))
        if j > 0:
            goals[slot] = ontology.informable[slot][j - 1]
    requests = {
        r for r, p in zip(ontology.requestable, prediction.requests) if p >= threshold
    }
    return BeliefState(goals, requests)


@dataclass
class EvalReport:
    joint_goal: float
    turn_request: float
    per_slot: dict[str, float]
    n_turns: int

    def to_dict(self) -> dict:
        return {
            "joint_goal": self.joint_goal,
            "turn_request": self.turn_request,
            "per_slot": self.per_slot,
            "n_turns": self.n_turns,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def evaluate_predictions(
    dialogues: list[Dialogue],
    predictions: list[list[TurnPrediction]],
    ontology: Ontology,
    threshold: float = 0.5,
) -> EvalReport:
    """Score per-turn predictions against gold labels.

    ``predictions[d][t]`` must align with ``dialogues[d].turns[t]``.  Kept
    separate from the model so the metrics can be exercised directly on
    hand-built predictions.
    """
    slots = ontology.informable_slots
    total = 0
    joint_correct = 0
    request_correct = 0
    slot_correct = {s: 0 for s in slots}
    for dialogue, turn_preds in zip(dialogues, predictions):
        state = BeliefState.initial(ontology)
        for turn, pred in zip(dialogue.turns, turn_preds):
            state = accumulate_belief(state, pred, ontology, threshold)
            total += 1
            match_all = True
            for s in slots:
                gold = turn.belief_goal.get(s)
                if state.goals[s] == gold:
                    slot_correct[s] += 1
                else:
                    match_all = False
            if match_all:
                joint_correct += 1
            if state.requests == turn.requests:
                request_correct += 1
    if total == 0:
        raise ConfigError("evaluation over zero turns")
    return EvalReport(
        joint_goal=joint_correct / total,
        turn_request=request_correct / total,
        per_slot={s: slot_correct[s] / total for s in slots},
        n_turns=total,
    )


def predict_dialogues(
    model: GSAT, dialogues: list[Dialogue], batch_size: int = 50
) -> list[list[TurnPrediction]]:
    """Per-turn predictions for every dialogue, batched across dialogues.

    Turn predictions depend only on the turn's own input, so turns from
    different dialogues share batches freely; accumulation happens afterwards
    in dialogue order.
    """
    examples = examples_from_dialogues(dialogues, model.vocab)
    out: list[list[TurnPrediction]] = [[None] * len(d.turns) for d in dialogues]
    for batch in make_batches(examples, model.ontology, batch_size):
        turns = model.predict_batch(batch).turns()
        for ex, pred in zip(batch.examples, turns):
            out[ex.dialogue_index][ex.turn_index] = pred
    return out


def evaluate_model(
    model: GSAT, dialogues: list[Dialogue], batch_size: int = 50, threshold: float = 0.5
) -> EvalReport:
    preds = predict_dialogues(model, dialogues, batch_size)
    return evaluate_predictions(dialogues, preds, model.ontology, threshold)


def joint_goal_accuracy(dialogues: list[Dialogue], model: GSAT) -> float:
    return evaluate_model(model, dialogues).joint_goal


def turn_request_accuracy(dialogues: list[Dialogue], model: GSAT) -> float:
    return evaluate_model(model, dialogues).turn_request


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------

def hardware_descriptor() -> str:
    return f"{platform.platform()} / {platform.processor() or 'unknown cpu'} / python {platform.python_version()}"


@dataclass
class ModeTiming:
    mean: float
    sd: float
    samples: int

    def to_dict(self) -> dict:
        return {"seconds_per_batch_mean": self.mean, "seconds_per_batch_sd": self.sd, "samples": self.samples}


@dataclass
class LatencyReport:
    batch_size: int
    iterations: int
    hardware: str
    train: ModeTiming | None = None
    predict: ModeTiming | None = None

    def to_dict(self) -> dict:
        d = {"batch_size": self.batch_size, "iterations": self.iterations, "hardware": self.hardware}
        if self.train:
            d["train"] = self.train.to_dict()
        if self.predict:
            d["predict"] = self.predict.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _time_loop(fn, batches, warmup: int, iters: int) -> ModeTiming:
    n = len(batches)
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()  # keep collector pauses out of the timed regions
    try:
        for i in range(warmup):
            fn(batches[i % n])
        samples = []
        for i in range(iters):
            batch = batches[i % n]
            t0 = time.perf_counter()
            fn(batch)
            samples.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    arr = np.asarray(samples)
    return ModeTiming(float(arr.mean()), float(arr.std(ddof=1)), iters)


def benchmark_latency(
    model: GSAT,
    batches: list[Batch],
    mode: str = "both",
    warmup: int = 5,
    iters: int = 50,
) -> LatencyReport:
    """Wall-clock seconds per batch for model execution only.

    Predict mode times the forward pass; train mode times forward + loss +
    backward + optimizer step, on a throwaway copy of the parameters so the
    served model is untouched.  Batches are pre-built; nothing data-side is
    inside the timed region.  Meaningful numbers require a quiesced,
    single-threaded process.
    """
    if iters < 20:
        raise ConfigError(f"benchmark needs at least 20 iterations, got {iters}")
    if mode not in ("train", "predict", "both"):
        raise ConfigError(f"unknown benchmark mode {mode!r}")
    if not batches:
        raise ConfigError("benchmark needs at least one batch")

    report = LatencyReport(
        batch_size=max(b.size for b in batches),
        iterations=iters,
        hardware=hardware_descriptor(),
    )

    # single-threaded BLAS while timing: threaded kernels on these small
    # arrays add only scheduler jitter
    with threadpool_limits(limits=1):
        if mode in ("predict", "both"):
            def predict_once(batch):
                with ag.no_grad():
                    model.forward_batch(batch, training=False)

            report.predict = _time_loop(predict_once, batches, warmup, iters)

        if mode in ("train", "both"):
            scratch = copy.deepcopy(model)
            rng = np.random.default_rng(0)
            optimizer = Adam(scratch.params, lr=1e-3)

            def train_once(batch):
                loss = turn_loss(scratch.forward_batch(batch, training=True, rng=rng), batch)
                ag.backward(loss)
                optimizer.step()

            report.train = _time_loop(train_once, batches, warmup, iters)

    return report
