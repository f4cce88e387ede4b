"""Dialogue corpus loading, ontology handling, vocabulary and batching.

Dataset files follow the WOZ2.0 JSON layout: a list of dialogues, each with a
``dialogue_idx`` and an ordered ``dialogue`` list of turns.  A turn carries
``transcript`` (user utterance), ``system_acts`` (strings for requested slots,
``[slot, value]`` pairs for informs), ``turn_label`` (new constraints and
requests for this turn) and ``belief_state`` (accumulated gold goals).

The same loader handles the English, Italian and German files; nothing in it
is language-specific beyond the tokens themselves.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
DONTCARE = "dontcare"

# act types emitted by the loader; kept in the vocabulary so system actions
# never tokenize to unknowns on in-domain data
ACT_TYPES = ("inform", "request")

_PUNCT = set(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, then peel leading/trailing punctuation.

    Inner punctuation (as in "i'm") stays attached.
    """
    tokens: list[str] = []
    for raw in text.lower().split():
        i, j = 0, len(raw)
        lead: list[str] = []
        trail: list[str] = []
        while i < j and raw[i] in _PUNCT:
            lead.append(raw[i])
            i += 1
        while j > i and raw[j - 1] in _PUNCT:
            trail.append(raw[j - 1])
            j -= 1
        tokens.extend(lead)
        if i < j:
            tokens.append(raw[i:j])
        tokens.extend(reversed(trail))
    return tokens


@dataclass(frozen=True)
class SystemAct:
    """One previous-system act: a type plus optional slot and value."""

    act: str
    slot: str | None = None
    value: str | None = None


def flatten_system_acts(acts: list[SystemAct]) -> list[str]:
    """Flatten acts to tokens: act type, then slot tokens, then value tokens.

    Absent parts are skipped; multiple acts concatenate in the given order.
    An empty act list (first turn) flattens to no tokens at all.
    """
    tokens: list[str] = []
    for a in acts:
        tokens.extend(tokenize(a.act))
        if a.slot:
            tokens.extend(tokenize(a.slot))
        if a.value:
            tokens.extend(tokenize(a.value))
    return tokens


class Ontology:
    """Informable slots with their value lists plus requestable slot names.

    Orderings are frozen at load time (file order); score vectors are indexed
    by these orders, so they must be identical across train/eval/serve.
    ``dontcare`` is appended to every informable value list because it occurs
    as a gold value.  ``none`` is never a listed value; it is modeled by the
    dedicated none-score channel.
    """

    def __init__(self, informable: dict[str, list[str]], requestable: list[str]):
        self.informable: dict[str, list[str]] = {}
        for slot, values in informable.items():
            values = list(values)
            if not values:
                raise DataFormatError(f"ontology slot '{slot}' has an empty value list")
            if len(set(values)) != len(values):
                raise DataFormatError(f"ontology slot '{slot}' has duplicate values")
            if "none" in values:
                raise DataFormatError(f"ontology slot '{slot}' lists 'none' as a value")
            if DONTCARE not in values:
                values = values + [DONTCARE]
            self.informable[slot] = values
        if len(set(requestable)) != len(requestable):
            raise DataFormatError("ontology has duplicate requestable slots")
        self.requestable: list[str] = list(requestable)

    @property
    def informable_slots(self) -> list[str]:
        return list(self.informable)

    def value_index(self, slot: str, value: str) -> int | None:
        try:
            return self.informable[slot].index(value)
        except ValueError:
            return None

    def to_dict(self) -> dict:
        # the stored lists already include dontcare; strip it so a
        # round-tripped ontology does not grow a duplicate
        return {
            "informable": {s: [v for v in vs if v != DONTCARE] for s, vs in self.informable.items()},
            "requestable": list(self.requestable),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ontology":
        try:
            return cls(d["informable"], d["requestable"])
        except KeyError as e:
            raise DataFormatError(f"ontology is missing the {e} section") from e

    @classmethod
    def load(cls, path: str | Path) -> "Ontology":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Ontology) and self.to_dict() == other.to_dict()


@dataclass
class Turn:
    """One dialogue turn with its gold labels."""

    system_acts: list[SystemAct]
    utterance: str
    turn_goal: dict[str, str]      # informable constraints newly expressed this turn
    requests: set[str]             # requestable slots asked this turn
    belief_goal: dict[str, str]    # accumulated gold goals up to this turn


@dataclass
class Dialogue:
    id: str
    turns: list[Turn]


def _parse_system_acts(raw, where: str) -> list[SystemAct]:
    acts: list[SystemAct] = []
    for a in raw:
        if isinstance(a, str):
            acts.append(SystemAct("request", a))
        elif isinstance(a, (list, tuple)) and len(a) == 2:
            acts.append(SystemAct("inform", a[0], a[1]))
        elif isinstance(a, (list, tuple)) and len(a) == 1:
            acts.append(SystemAct("request", a[0]))
        else:
            raise DataFormatError(f"{where}: unparseable system act {a!r}")
    return acts


def load_dataset(
    path: str | Path, ontology: Ontology | None = None, split: str | None = None
) -> list[Dialogue]:
    """Load a WOZ2.0-layout dialogue file.

    Gold values absent from the ontology are kept as literal strings with a
    warning.  File-provided accumulated goals are cross-checked against
    re-accumulated turn goals; on mismatch the file wins, with a warning.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise DataFormatError(f"{path}: expected a list of dialogues")

    dialogues: list[Dialogue] = []
    for d in raw:
        did = str(d.get("dialogue_idx", len(dialogues)))
        turns: list[Turn] = []
        running: dict[str, str] = {}
        for ti, t in enumerate(d.get("dialogue", [])):
            where = f"dialogue {did} turn {ti}"
            try:
                utterance = t["transcript"]
                acts = _parse_system_acts(t.get("system_acts", []), where)
                turn_goal: dict[str, str] = {}
                requests: set[str] = set()
                for pair in t.get("turn_label", []):
                    if len(pair) != 2:
                        raise DataFormatError(f"{where}: malformed turn_label entry {pair!r}")
                    a, b = pair
                    if a == "request":
                        if ontology is not None and b not in ontology.requestable:
                            logger.warning("%s: requested slot %r not in ontology, dropped", where, b)
                        else:
                            requests.add(b)
                    else:
                        turn_goal[a] = b
                belief: dict[str, str] = {}
                for entry in t.get("belief_state", []):
                    if entry.get("act") != "inform":
                        continue
                    for s, v in entry.get("slots", []):
                        belief[s] = v
            except (KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"{where}: malformed record ({e})") from e

            if ontology is not None:
                for s, v in turn_goal.items():
                    if s not in ontology.informable:
                        logger.warning("%s: gold slot %r not in ontology, kept as literal", where, s)
                    elif ontology.value_index(s, v) is None:
                        logger.warning(
                            "%s: gold value %r not in ontology for slot %r, kept as literal",
                            where, v, s,
                        )

            running = dict(running)
            running.update(turn_goal)
            if running != belief:
                logger.warning(
                    "%s: accumulated turn goals %r disagree with file belief state %r; file wins",
                    where, running, belief,
                )
                running = dict(belief)
            turns.append(Turn(acts, utterance, turn_goal, requests, dict(belief)))
        dialogues.append(Dialogue(did, turns))

    logger.info(
        "loaded %d dialogues (%d turns) from %s%s",
        len(dialogues),
        sum(len(d.turns) for d in dialogues),
        path.name,
        f" [{split}]" if split else "",
    )
    return dialogues


class Vocabulary:
    """Token-to-id map with reserved ids 0 (padding) and 1 (unknown).

    Built from the training split plus all ontology slot/value/act tokens;
    dev/test tokens outside it map to the unknown id.
    """

    def __init__(self, tokens: list[str] | None = None):
        self._id_to_token: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self._token_to_id: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens or []:
            self.add(tok)

    def add(self, token: str) -> int:
        tid = self._token_to_id.get(token)
        if tid is None:
            tid = len(self._id_to_token)
            self._token_to_id[token] = tid
            self._id_to_token.append(token)
        return tid

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._token_to_id.get(t, UNK_ID) for t in tokens]

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def tokens(self) -> list[str]:
        return list(self._id_to_token)

    @classmethod
    def from_tokens(cls, id_to_token: list[str]) -> "Vocabulary":
        if id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataFormatError("vocabulary list must start with the reserved tokens")
        v = cls()
        for tok in id_to_token[2:]:
            v.add(tok)
        return v

    @classmethod
    def build(cls, train_dialogues: list[Dialogue], ontology: Ontology) -> "Vocabulary":
        v = cls()
        for d in train_dialogues:
            for t in d.turns:
                for tok in flatten_system_acts(t.system_acts):
                    v.add(tok)
                for tok in tokenize(t.utterance):
                    v.add(tok)
        for act in ACT_TYPES:
            v.add(act)
        for slot, values in ontology.informable.items():
            for tok in tokenize(slot):
                v.add(tok)
            for value in values:
                for tok in tokenize(value):
                    v.add(tok)
        for slot in ontology.requestable:
            for tok in tokenize(slot):
                v.add(tok)
        return v


def build_input(vocab: Vocabulary, acts: list[SystemAct], utterance: str) -> list[int]:
    """Encoder input ids: flattened system action tokens then utterance tokens.

    Never empty; a degenerate turn becomes a single unknown token.
    """
    ids = vocab.encode(flatten_system_acts(acts) + tokenize(utterance))
    return ids or [UNK_ID]


@dataclass
class TurnExample:
    """A single turn prepared for batching, with provenance indices."""

    dialogue_index: int
    turn_index: int
    turn: Turn
    input_ids: list[int]


def examples_from_dialogues(dialogues: list[Dialogue], vocab: Vocabulary) -> list[TurnExample]:
    return [
        TurnExample(di, ti, t, build_input(vocab, t.system_acts, t.utterance))
        for di, d in enumerate(dialogues)
        for ti, t in enumerate(d.turns)
    ]


@dataclass
class Batch:
    token_ids: np.ndarray                    # [B, T_max] int64, 0-padded
    lengths: np.ndarray                      # [B] int64
    mask: np.ndarray                         # [B, T_max] bool
    informable_labels: dict[str, tuple[np.ndarray, np.ndarray]]  # slot -> (index [B], valid [B])
    request_labels: np.ndarray               # [B, R] float64 indicators
    examples: list[TurnExample] = field(repr=False, default_factory=list)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def _label_batch(examples: list[TurnExample], ontology: Ontology) -> tuple[dict, np.ndarray]:
    informable: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for slot, values in ontology.informable.items():
        idx = np.zeros(len(examples), dtype=np.int64)
        valid = np.ones(len(examples), dtype=bool)
        for i, ex in enumerate(examples):
            v = ex.turn.turn_goal.get(slot)
            if v is None:
                idx[i] = 0  # none channel
            else:
                j = ontology.value_index(slot, v)
                if j is None:
                    valid[i] = False  # out-of-ontology gold, skipped by the loss
                else:
                    idx[i] = j + 1
        informable[slot] = (idx, valid)
    req = np.zeros((len(examples), len(ontology.requestable)), dtype=np.float64)
    for i, ex in enumerate(examples):
        for j, r in enumerate(ontology.requestable):
            if r in ex.turn.requests:
                req[i, j] = 1.0
    return informable, req


def make_batches(
    examples: list[TurnExample],
    ontology: Ontology,
    batch_size: int,
    shuffle_rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Group turns into padded, masked batches.

    With ``shuffle_rng`` the order is a deterministic permutation of the
    examples (training); without it the given order is kept (evaluation).
    Every turn appears in exactly one batch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(examples)))
    if shuffle_rng is not None:
        order = list(shuffle_rng.permutation(len(examples)))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        lengths = np.array([len(ex.input_ids) for ex in chunk], dtype=np.int64)
        t_max = int(lengths.max())
        ids = np.full((len(chunk), t_max), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), t_max), dtype=bool)
        for i, ex in enumerate(chunk):
            ids[i, : lengths[i]] = ex.input_ids
            mask[i, : lengths[i]] = True
        informable, req = _label_batch(chunk, ontology)
        batches.append(Batch(ids, lengths, mask, informable, req, chunk))
    return batches


def load_pretrained_embeddings(
    path: str | Path,
    vocab: Vocabulary,
    dim: int,
    init_rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Read a text vector file (token then ``dim`` floats per line).

    Rows for in-vocabulary tokens come from the file; everything else keeps
    the init policy (uniform +-1/sqrt(dim)).  The padding row is forced to
    zero.  Returns the matrix and the vocabulary coverage fraction.
    """
    k = 1.0 / np.sqrt(dim)
    matrix = init_rng.uniform(-k, k, size=(len(vocab), dim))
    found = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, floats = parts[0], parts[1:]
            if len(floats) != dim:
                raise ConfigError(
                    f"embedding file row for {token!r} has {len(floats)} dims, expected {dim}"
                )
            if token in vocab:
                matrix[vocab.id(token)] = [float(x) for x in floats]
                found += 1
    matrix[PAD_ID] = 0.0
    coverage = found / len(vocab)
    logger.info("pretrained embeddings cover %.1f%% of the vocabulary", 100.0 * coverage)
    return matrix, coverage
