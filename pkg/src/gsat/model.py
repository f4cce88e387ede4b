"""Belief tracker network: one shared BiLSTM encoder over the concatenated
system-action and user-utterance tokens, plus an attentive classifier per
informable slot and one for requests.

Each classifier owns its full parameter set (no sharing below the encoder):
a value projection, the attention query/scoring weights, and, for informable
slots, a learned scalar score for the "none" choice that is prepended before
the softmax over values.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import UNK_ID, Batch, Ontology, SystemAct, Vocabulary, build_input, tokenize
from .errors import ConfigError, DimensionError

REQUEST_HEAD = "requests"


@dataclass
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 128
    hidden_size: int = 64
    dropout: float = 0.2
    embeddings_trainable: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.embedding_dim <= 0 or self.hidden_size <= 0:
            raise ConfigError("embedding_dim and hidden_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover the reserved padding/unknown ids")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embedding_dim": self.embedding_dim,
            "hidden_size": self.hidden_size,
            "dropout": self.dropout,
            "embeddings_trainable": self.embeddings_trainable,
            "init_seed": self.init_seed,
        }


@dataclass
class TurnPrediction:
    """Per-turn output: a distribution over [none]+values for each informable
    slot, and an independent probability per requestable slot."""

    informable: dict[str, np.ndarray]
    requests: np.ndarray


@dataclass
class BatchPrediction:
    """Batched logits straight off the forward pass.

    Probabilities are derived lazily; the logit tensors stay attached to the
    tape so the training loss can be computed on them directly.
    """

    slots: list[str]
    requestable: list[str]
    informable_logits: dict[str, Tensor]
    request_logits: Tensor
    _probs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def informable_probs(self, slot: str) -> np.ndarray:
        if slot not in self._probs:
            self._probs[slot] = ag.masked_softmax_values(self.informable_logits[slot].data, None)
        return self._probs[slot]

    def request_probs(self) -> np.ndarray:
        if "__requests__" not in self._probs:
            self._probs["__requests__"] = ag.sigmoid_values(self.request_logits.data)
        return self._probs["__requests__"]

    @property
    def size(self) -> int:
        return self.request_logits.shape[0]

    def turn(self, i: int) -> TurnPrediction:
        return TurnPrediction(
            {s: self.informable_probs(s)[i] for s in self.slots},
            self.request_probs()[i],
        )

    def turns(self) -> list[TurnPrediction]:
        return [self.turn(i) for i in range(self.size)]


class _Head:
    """Parameters of one slot-attentive classifier."""

    def __init__(self, w_s, w_h, b_h, w_c, b_c, score_none=None):
        self.w_s = w_s
        self.w_h = w_h
        self.b_h = b_h
        self.w_c = w_c
        self.b_c = b_c
        self.score_none = score_none


def _token_bag(vocab: Vocabulary, phrases: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten phrases to token ids with bag offsets for summed embeddings."""
    flat: list[int] = []
    offsets = [0]
    for phrase in phrases:
        ids = vocab.encode(tokenize(phrase)) or [UNK_ID]
        flat.extend(ids)
        offsets.append(len(flat))
    return np.asarray(flat, dtype=np.int64), np.asarray(offsets, dtype=np.int64)


class GSAT:
    """The tracker model. Parameters live in an ordered name->Tensor registry."""

    def __init__(self, config: ModelConfig, ontology: Ontology, vocab: Vocabulary):
        if config.vocab_size != len(vocab):
            raise ConfigError(
                f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}"
            )
        self.config = config
        self.ontology = ontology
        self.vocab = vocab
        self._value_bags = {
            slot: _token_bag(vocab, values) for slot, values in ontology.informable.items()
        }
        self._request_bag = _token_bag(vocab, ontology.requestable)

        d, h = config.embedding_dim, config.hidden_size
        rng = np.random.default_rng(config.init_seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

        def param(name, shape, fan_in, trainable=True):
            k = 1.0 / np.sqrt(fan_in)
            t = Tensor(rng.uniform(-k, k, size=shape), requires_grad=trainable)
            self.params[name] = t
            return t

        emb = param("embedding", (config.vocab_size, d), d, trainable=config.embeddings_trainable)
        emb.data[0] = 0.0  # padding row stays zero

        for direction in ("lstm_fw", "lstm_bw"):
            param(f"{direction}.w_x", (d, 4 * h), d)
            param(f"{direction}.w_h", (h, 4 * h), h)
            b = param(f"{direction}.b", (4 * h,), h)
            b.data[h : 2 * h] += 1.0  # forget-gate bias

        self._heads: "OrderedDict[str, _Head]" = OrderedDict()
        for slot in ontology.informable_slots:
            self._heads[slot] = self._make_head(f"slot.{slot}", param, d, h, with_none=True)
        self._heads[REQUEST_HEAD] = self._make_head("request", param, d, h, with_none=False)

    @staticmethod
    def _make_head(prefix, param, d, h, with_none):
        w_s = param(f"{prefix}.w_s", (2 * h, d), d)
        w_h = param(f"{prefix}.w_h", (2 * h, 2 * h), 2 * h)
        b_h = param(f"{prefix}.b_h", (2 * h,), 2 * h)
        w_c = param(f"{prefix}.w_c", (4 * h, 1), 4 * h)
        b_c = param(f"{prefix}.b_c", (1, 1), 4 * h)
        score_none = param(f"{prefix}.score_none", (1, 1), 1) if with_none else None
        return _Head(w_s, w_h, b_h, w_c, b_c, score_none)

    # -- encoder ----------------------------------------------------------

    def _lstm_step(self, prefix: str, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
        h = self.config.hidden_size
        p = self.params
        gates = ag.add(
            ag.add(ag.matmul(x_t, p[f"{prefix}.w_x"]), ag.matmul(h_prev, p[f"{prefix}.w_h"])),
            p[f"{prefix}.b"],
        )
        i = ag.sigmoid(ag.slice_cols(gates, 0, h))
        f = ag.sigmoid(ag.slice_cols(gates, h, 2 * h))
        g = ag.tanh(ag.slice_cols(gates, 2 * h, 3 * h))
        o = ag.sigmoid(ag.slice_cols(gates, 3 * h, 4 * h))
        c = ag.add(ag.mul(f, c_prev), ag.mul(i, g))
        return ag.mul(o, ag.tanh(c)), c

    def encode(
        self,
        token_ids: np.ndarray,
        mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[list[Tensor], Tensor]:
        """Run the BiLSTM over [B, T] token ids.

        Returns per-position states (each [B, 2H], forward and backward
        halves concatenated) and the sequence summary: the forward state at
        each row's last real token next to the backward state at position 0.
        Padded positions never influence either one: the recurrent state
        carries through them unchanged, which makes the outputs identical to
        running each row unpadded.
        """
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim == 1:
            token_ids = token_ids[None, :]
        batch, t_max = token_ids.shape
        if mask is None:
            mask = np.ones((batch, t_max), dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(batch, t_max)

        rate = self.config.dropout
        emb = self.params["embedding"]
        xs = [
            ag.dropout(ag.embedding(emb, token_ids[:, t]), rate, training, rng)
            for t in range(t_max)
        ]
        keep = [None if mask[:, t].all() else mask[:, t].astype(np.float64)[:, None] for t in range(t_max)]
        m_cols = [None if k is None else (Tensor(k), Tensor(1.0 - k)) for k in keep]

        h = self.config.hidden_size
        zeros = Tensor(np.zeros((batch, h)))

        def run(prefix, order):
            states = [None] * t_max
            h_t, c_t = zeros, zeros
            for t in order:
                h_new, c_new = self._lstm_step(prefix, xs[t], h_t, c_t)
                if m_cols[t] is not None:
                    m, inv = m_cols[t]
                    h_new = ag.add(ag.mul(m, h_new), ag.mul(inv, h_t))
                    c_new = ag.add(ag.mul(m, c_new), ag.mul(inv, c_t))
                h_t, c_t = h_new, c_new
                states[t] = h_t
            return states, h_t

        fw_states, fw_last = run("lstm_fw", range(t_max))
        bw_states, _ = run("lstm_bw", range(t_max - 1, -1, -1))

        h_states = [
            ag.dropout(ag.concat([fw_states[t], bw_states[t]], axis=1), rate, training, rng)
            for t in range(t_max)
        ]
        h_l = ag.dropout(ag.concat([fw_last, bw_states[0]], axis=1), rate, training, rng)
        return h_states, h_l

    # -- classifiers ------------------------------------------------------

    def attend(
        self, slot: str, h_l: Tensor, h_states: list[Tensor], mask: np.ndarray | None = None
    ) -> Tensor:
        """Slot-conditioned attention over the encoder states.

        The summary state is projected through a ReLU into a slot query; each
        position is scored by a tanh over [query; state], the scores pass
        through a masked softmax, and the result is the weighted state sum.
        """
        head = self._heads[slot]
        query = ag.relu(ag.add(ag.matmul(h_l, head.w_h), head.b_h))
        cols = [
            ag.tanh(ag.add(ag.matmul(ag.concat([query, h_t], axis=1), head.w_c), head.b_c))
            for h_t in h_states
        ]
        scores = cols[0] if len(cols) == 1 else ag.concat(cols, axis=1)
        alpha = ag.softmax_masked(scores, mask)
        ctx = None
        for t, h_t in enumerate(h_states):
            term = ag.mul(ag.slice_cols(alpha, t, t + 1), h_t)
            ctx = term if ctx is None else ag.add(ctx, term)
        return ctx

    def slot_value_matrix(self, slot: str) -> Tensor:
        """[2H x |values|] projection of the summed value-token embeddings.

        Rebuilt on every forward pass so gradients reach both the projection
        and the shared embedding matrix.
        """
        flat, offsets = self._value_bags[slot] if slot != REQUEST_HEAD else self._request_bag
        vembs = ag.embedding_bag(self.params["embedding"], flat, offsets)
        return ag.matmul(self._heads[slot].w_s, ag.transpose(vembs))

    def informable_logits(self, slot: str, ctx: Tensor) -> Tensor:
        """[B x (|values|+1)] scores; index 0 is the learned none score."""
        head = self._heads[slot]
        score = ag.matmul(ctx, self.slot_value_matrix(slot))
        none_col = ag.add(Tensor(np.zeros((ctx.shape[0], 1))), head.score_none)
        return ag.concat([none_col, score], axis=1)

    def score_informable(self, slot: str, ctx: Tensor) -> Tensor:
        return ag.softmax_masked(self.informable_logits(slot, ctx))

    def request_logits(self, ctx: Tensor) -> Tensor:
        return ag.matmul(ctx, self.slot_value_matrix(REQUEST_HEAD))

    def score_requestable(self, ctx: Tensor) -> Tensor:
        return ag.sigmoid(self.request_logits(ctx))

    # -- full passes ------------------------------------------------------

    def forward_batch(
        self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None
    ) -> BatchPrediction:
        h_states, h_l = self.encode(batch.token_ids, batch.mask, training, rng)
        informable = {}
        for slot in self.ontology.informable_slots:
            ctx = self.attend(slot, h_l, h_states, batch.mask)
            informable[slot] = self.informable_logits(slot, ctx)
        ctx = self.attend(REQUEST_HEAD, h_l, h_states, batch.mask)
        request = self.request_logits(ctx)
        return BatchPrediction(
            self.ontology.informable_slots, list(self.ontology.requestable), informable, request
        )

    def predict_batch(self, batch: Batch) -> BatchPrediction:
        with ag.no_grad():
            return self.forward_batch(batch, training=False)

    def predict_turn(self, system_acts: list[SystemAct], utterance: str) -> TurnPrediction:
        """Inference on a single turn; deterministic, nothing recorded."""
        ids = np.asarray([build_input(self.vocab, system_acts, utterance)], dtype=np.int64)
        with ag.no_grad():
            h_states, h_l = self.encode(ids)
            informable = {}
            for slot in self.ontology.informable_slots:
                ctx = self.attend(slot, h_l, h_states)
                informable[slot] = self.informable_logits(slot, ctx)
            request = self.request_logits(self.attend(REQUEST_HEAD, h_l, h_states))
        pred = BatchPrediction(
            self.ontology.informable_slots, list(self.ontology.requestable), informable, request
        )
        return pred.turn(0)

    # -- bookkeeping ------------------------------------------------------

    def count_parameters(self) -> tuple[int, dict[str, int]]:
        """Trainable scalar count with a per-group breakdown."""
        groups: dict[str, int] = {}
        for name, t in self.params.items():
            if not t.requires_grad:
                continue
            if name == "embedding":
                key = "embedding"
            elif name.startswith("lstm_"):
                key = "bilstm"
            elif name.startswith("slot."):
                key = "head." + name.rsplit(".", 1)[0].split(".", 1)[1]
            else:
                key = "head." + REQUEST_HEAD
            groups[key] = groups.get(key, 0) + t.size
        return sum(groups.values()), groups

    def parameter_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.params.items())

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()
        self.params["embedding"].data[0] = 0.0

    def set_embeddings(self, matrix: np.ndarray) -> None:
        emb = self.params["embedding"]
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != emb.shape:
            raise DimensionError(f"embedding matrix shape {matrix.shape} != expected {emb.shape}")
        emb.data = matrix.copy()
        emb.data[0] = 0.0

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None
