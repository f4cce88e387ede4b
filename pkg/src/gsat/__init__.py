"""Dialogue state tracking with a shared BiLSTM encoder and slot-attentive
decoders, built on an in-package reverse-mode autodiff engine."""

import os

# Every array in this package is small ([batch <= 50, 4*hidden]); threaded
# BLAS only adds wakeup jitter and slows the per-batch latency path.  Must be
# set before numpy loads its BLAS; an explicit user setting wins.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .autograd import GradientTape, Tensor, backward, no_grad
from .data import (
    Batch,
    Dialogue,
    Ontology,
    SystemAct,
    Turn,
    Vocabulary,
    build_input,
    flatten_system_acts,
    load_dataset,
    load_pretrained_embeddings,
    make_batches,
    tokenize,
)
from .evaluation import (
    BeliefState,
    EvalReport,
    LatencyReport,
    accumulate_belief,
    benchmark_latency,
    evaluate_model,
    evaluate_predictions,
    joint_goal_accuracy,
    turn_request_accuracy,
)
from .model import GSAT, BatchPrediction, ModelConfig, TurnPrediction
from .training import Adam, TrainConfig, load_checkpoint, save_checkpoint, train, turn_loss

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Batch",
    "BatchPrediction",
    "BeliefState",
    "Dialogue",
    "EvalReport",
    "GSAT",
    "GradientTape",
    "LatencyReport",
    "ModelConfig",
    "Ontology",
    "SystemAct",
    "Tensor",
    "TrainConfig",
    "Turn",
    "TurnPrediction",
    "Vocabulary",
    "accumulate_belief",
    "backward",
    "benchmark_latency",
    "build_input",
    "evaluate_model",
    "evaluate_predictions",
    "flatten_system_acts",
    "joint_goal_accuracy",
    "load_checkpoint",
    "load_dataset",
    "load_pretrained_embeddings",
    "make_batches",
    "no_grad",
    "save_checkpoint",
    "tokenize",
    "train",
    "turn_loss",
    "turn_request_accuracy",
]
