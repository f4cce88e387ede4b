"""Shared fixtures and oracle helpers for the test suite."""

from __future__ import annotations

import json
import os
from pathlib import Path

# single-threaded BLAS before numpy loads: stable timings, and faster on the
# small arrays this package works with
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from gsat import GSAT, Dialogue, ModelConfig, Ontology, SystemAct, Turn, Vocabulary
from gsat import autograd as ag

DATA_DIR = Path(__file__).parent / "data"

FOODS = ["italian", "chinese", "indian", "french", "thai"]
AREAS = ["north", "south", "east", "west", "centre"]
PRICES = ["cheap", "moderate", "expensive"]
REQUESTABLES = ["address", "phone", "postcode"]


# ---------------------------------------------------------------------------
# gradient-check oracle
# ---------------------------------------------------------------------------

def finite_difference(loss_fn, tensor: ag.Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one tensor."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = loss_fn()
        flat[i] = orig - eps
        fm = loss_fn()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(tensor.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Worst relative error with an absolute floor.

    The floor absorbs finite-difference roundoff on near-zero gradients:
    central differences at step 1e-5 in float64 carry ~1e-11 absolute noise,
    which is meaningless relative to a gradient of, say, 1e-9.
    """
    analytic = np.asarray(analytic).reshape(-1)
    numeric = np.asarray(numeric).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(build_loss, tensors: dict[str, ag.Tensor], eps: float = 1e-5,
                    tol: float = 1e-4) -> None:
    """Backward gradients vs the finite-difference oracle for every tensor.

    ``build_loss`` must construct the scalar loss Tensor from current data.
    The numeric side only ever evaluates values (never the tape).
    """
    for t in tensors.values():
        t.grad = None
    loss = build_loss()
    ag.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }
    for t in tensors.values():
        t.grad = None

    def value():
        with ag.no_grad():
            return build_loss().item()

    for name, t in tensors.items():
        numeric = finite_difference(value, t, eps)
        err = max_rel_err(analytic[name], numeric)
        assert err < tol, f"gradient mismatch for {name}: max rel err {err:.3e}"


# ---------------------------------------------------------------------------
# corpus fixtures
# ---------------------------------------------------------------------------

def toy_ontology() -> Ontology:
    return Ontology(
        {"food": list(FOODS), "area": list(AREAS), "price range": list(PRICES)},
        list(REQUESTABLES),
    )


def synth_raw_corpus(n_dialogues: int, seed: int = 7) -> list[dict]:
    """Deterministic WOZ-layout dialogues a small model can memorize.

    Utterances mention their gold values verbatim, in varied templates, so
    attention has something to find.
    """
    rng = np.random.default_rng(seed)
    first_templates = [
        "i am looking for a {food} restaurant in the {area} part of town",
        "find me a {food} place in the {area} area please",
        "i would like {food} food somewhere in the {area}",
    ]
    price_templates = [
        "something in the {price} price range please",
        "it should be {price} priced",
    ]
    request_templates = [
        ("can i get the address and phone number of the venue", {"address", "phone"}),
        ("what is the address", {"address"}),
        ("could you give me the phone number and postcode", {"phone", "postcode"}),
    ]
    corpus = []
    for k in range(n_dialogues):
        food = FOODS[int(rng.integers(len(FOODS)))]
        area = AREAS[int(rng.integers(len(AREAS)))]
        price = PRICES[int(rng.integers(len(PRICES)))]
        req_utt, req_set = request_templates[int(rng.integers(len(request_templates)))]

        belief1 = [{"slots": [["food", food]], "act": "inform"},
                   {"slots": [["area", area]], "act": "inform"}]
        belief2 = belief1 + [{"slots": [["price range", price]], "act": "inform"}]
        turns = [
            {
                "turn_idx": 0,
                "system_transcript": "",
                "system_acts": [],
                "transcript": first_templates[int(rng.integers(len(first_templates)))].format(
                    food=food, area=area),
                "turn_label": [["food", food], ["area", area]],
                "belief_state": belief1,
            },
            {
                "turn_idx": 1,
                "system_transcript": "what price range?",
                "system_acts": ["price range"],
                "transcript": price_templates[int(rng.integers(len(price_templates)))].format(
                    price=price),
                "turn_label": [["price range", price]],
                "belief_state": belief2,
            },
            {
                "turn_idx": 2,
                "system_transcript": "here is a venue",
                "system_acts": [["food", food]],
                "transcript": req_utt,
                "turn_label": [["request", r] for r in sorted(req_set)],
                "belief_state": belief2 + [
                    {"slots": [["slot", r]], "act": "request"} for r in sorted(req_set)
                ],
            },
        ]
        corpus.append({"dialogue_idx": k, "dialogue": turns})
    return corpus


def write_corpus(path: Path, corpus: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(corpus, indent=1), encoding="utf-8")
    return path


def tiny_tracker(seed: int = 3, dropout: float = 0.0,
                 embedding_dim: int = 8, hidden_size: int = 4):
    """A 2-slot, 2-requestable tracker plus a 2-turn toy dialogue."""
    ontology = Ontology({"food": ["italian", "chinese"], "area": ["north", "south"]},
                        ["address", "phone"])
    turns = [
        Turn([], "i want cheap italian food please", {"food": "italian"}, set(),
             {"food": "italian"}),
        Turn([SystemAct("inform", "food", "italian")], "what is the address",
             {}, {"address"}, {"food": "italian"}),
    ]
    dialogue = Dialogue("0", turns)
    vocab = Vocabulary.build([dialogue], ontology)
    config = ModelConfig(vocab_size=len(vocab), embedding_dim=embedding_dim,
                         hidden_size=hidden_size, dropout=dropout, init_seed=seed)
    return GSAT(config, ontology, vocab), dialogue


@pytest.fixture(scope="session")
def ontology_file(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("ontology") / "ontology.json"
    path.write_text(json.dumps(toy_ontology().to_dict()), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """A miniature three-split corpus in the expected file layout."""
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root / "woz_train_en.json", synth_raw_corpus(10, seed=7))
    write_corpus(root / "woz_validate_en.json", synth_raw_corpus(4, seed=11))
    write_corpus(root / "woz_test_en.json", synth_raw_corpus(4, seed=13))
    return root


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, corpus_dir, ontology_file):
    """One small CLI training run shared by checkpoint-consuming tests."""
    from gsat.cli import main

    out = tmp_path_factory.mktemp("run")
    code = main([
        "train",
        "--data", str(corpus_dir),
        "--ontology", str(ontology_file),
        "--out", str(out),
        "--seed", "1",
        "--batch-size", "8",
        "--epochs", "80",
        "--patience", "80",
        "--lr", "0.01",
        "--embedding-dim", "32",
        "--hidden-size", "16",
    ])
    assert code == 0
    return {"out": out, "checkpoint": out / "seed_1" / "model.ckpt",
            "data": corpus_dir, "ontology": ontology_file}
