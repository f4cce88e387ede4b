"""Corpus loading, tokenization, vocabulary and batching tests."""

import json
import logging

import numpy as np
import pytest

from conftest import DATA_DIR, synth_raw_corpus, toy_ontology, write_corpus
from gsat.data import (
    PAD_ID,
    UNK_ID,
    Dialogue,
    Ontology,
    SystemAct,
    Turn,
    Vocabulary,
    build_input,
    examples_from_dialogues,
    flatten_system_acts,
    load_dataset,
    load_pretrained_embeddings,
    make_batches,
    tokenize,
)
from gsat.errors import ConfigError, DataFormatError


class TestTokenize:
    def test_punctuation_splitting(self):
        assert tokenize("I'm looking for Italian food.") == [
            "i'm", "looking", "for", "italian", "food", ".",
        ]

    def test_empty(self):
        assert tokenize("") == []

    def test_lowercasing(self):
        assert tokenize("WEST") == ["west"]

    def test_leading_and_repeated_punctuation(self):
        assert tokenize('"food!?"') == ['"', "food", "!", "?", '"']
        assert tokenize("...") == [".", ".", "."]


class TestFlattenSystemActs:
    def test_single_inform_like_act(self):
        acts = [SystemAct("confirm", "food", "Italian")]
        assert flatten_system_acts(acts) == ["confirm", "food", "italian"]

    def test_empty_first_turn(self):
        assert flatten_system_acts([]) == []

    def test_multiple_acts_in_order_with_multitoken_slot(self):
        acts = [SystemAct("request", "area"), SystemAct("inform", "price range", "moderate")]
        assert flatten_system_acts(acts) == [
            "request", "area", "inform", "price", "range", "moderate",
        ]


class TestOntology:
    def test_dontcare_appended(self):
        ont = toy_ontology()
        for values in ont.informable.values():
            assert values[-1] == "dontcare"
            assert values.count("dontcare") == 1

    def test_rejects_none_value(self):
        with pytest.raises(DataFormatError):
            Ontology({"food": ["italian", "none"]}, [])

    def test_rejects_duplicates_and_empty(self):
        with pytest.raises(DataFormatError):
            Ontology({"food": ["a", "a"]}, [])
        with pytest.raises(DataFormatError):
            Ontology({"food": []}, [])

    def test_ordering_is_file_order(self):
        ont = Ontology({"b": ["z", "y"], "a": ["q"]}, ["r2", "r1"])
        assert ont.informable_slots == ["b", "a"]
        assert ont.informable["b"][:2] == ["z", "y"]
        assert ont.requestable == ["r2", "r1"]

    def test_roundtrip(self):
        ont = toy_ontology()
        assert Ontology.from_dict(ont.to_dict()) == ont


class TestLoadDataset:
    def test_sample_dialogue_roundtrip(self):
        ont = toy_ontology()
        # the expected parse of the hand-written fixture, authored with it
        dialogues = load_dataset(DATA_DIR / "sample_dialogue.json", ont)
        assert len(dialogues) == 1
        d = dialogues[0]
        assert d.id == "42"
        assert len(d.turns) == 3

        t0, t1, t2 = d.turns
        assert t0.system_acts == []
        assert t0.utterance == "I'm looking for a moderately priced Italian restaurant."
        assert t0.turn_goal == {"food": "italian", "price range": "moderate"}
        assert t0.requests == set()
        assert t0.belief_goal == {"food": "italian", "price range": "moderate"}

        assert t1.system_acts == [SystemAct("request", "area")]
        assert t1.turn_goal == {"area": "west"}
        assert t1.requests == {"phone"}
        assert t1.belief_goal == {
            "food": "italian", "price range": "moderate", "area": "west",
        }

        assert t2.system_acts == [SystemAct("inform", "phone", "123")]
        assert t2.turn_goal == {}
        assert t2.requests == set()
        assert t2.belief_goal == t1.belief_goal

    def test_split_sizes(self, tmp_path):
        path = write_corpus(tmp_path / "train.json", synth_raw_corpus(10))
        assert len(load_dataset(path, toy_ontology())) == 10

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_dataset(DATA_DIR / "does_not_exist.json")

    def test_malformed_turn_names_dialogue_and_turn(self, tmp_path):
        raw = [{"dialogue_idx": 9, "dialogue": [{"turn_label": [["food"]],
                                                 "transcript": "hi", "system_acts": []}]}]
        path = write_corpus(tmp_path / "bad.json", raw)
        with pytest.raises(DataFormatError, match="dialogue 9 turn 0"):
            load_dataset(path)

    def test_unknown_gold_value_warns_and_keeps_literal(self, tmp_path, caplog):
        raw = synth_raw_corpus(1)
        raw[0]["dialogue"][0]["turn_label"] = [["food", "martian"]]
        raw[0]["dialogue"][0]["belief_state"] = [{"slots": [["food", "martian"]], "act": "inform"}]
        raw[0]["dialogue"][1]["belief_state"] = [
            {"slots": [["food", "martian"]], "act": "inform"},
            {"slots": [["price range", raw[0]["dialogue"][1]["turn_label"][0][1]]], "act": "inform"},
        ]
        path = write_corpus(tmp_path / "odd.json", raw)
        with caplog.at_level(logging.WARNING):
            dialogues = load_dataset(path, toy_ontology())
        assert "martian" in caplog.text
        assert dialogues[0].turns[0].turn_goal["food"] == "martian"

    def test_belief_mismatch_warns_and_file_wins(self, tmp_path, caplog):
        raw = synth_raw_corpus(1)
        # contradict the accumulation: file belief drops the area constraint
        raw[0]["dialogue"][0]["belief_state"] = [{"slots": [["food",
            raw[0]["dialogue"][0]["turn_label"][0][1]]], "act": "inform"}]
        path = write_corpus(tmp_path / "mismatch.json", raw)
        with caplog.at_level(logging.WARNING):
            dialogues = load_dataset(path, toy_ontology())
        assert "file wins" in caplog.text
        assert "area" not in dialogues[0].turns[0].belief_goal


class TestVocabulary:
    def build(self, tmp_path):
        ont = toy_ontology()
        train = load_dataset(write_corpus(tmp_path / "t.json", synth_raw_corpus(6)), ont)
        return Vocabulary.build(train, ont), train, ont

    def test_reserved_ids(self, tmp_path):
        vocab, _, _ = self.build(tmp_path)
        assert vocab.tokens()[0] == "<pad>"
        assert vocab.tokens()[1] == "<unk>"
        assert vocab.id("<pad>") == PAD_ID

    def test_deterministic(self, tmp_path):
        v1, _, _ = self.build(tmp_path)
        v2, _, _ = self.build(tmp_path)
        assert v1.tokens() == v2.tokens()

    def test_bijective_over_non_reserved(self, tmp_path):
        vocab, _, _ = self.build(tmp_path)
        tokens = vocab.tokens()
        assert len(set(tokens)) == len(tokens)
        for i, tok in enumerate(tokens):
            assert vocab.id(tok) == i

    def test_no_gold_leakage_unknowns_map_to_unk(self, tmp_path):
        vocab, _, _ = self.build(tmp_path)
        assert "zanzibar" not in vocab
        assert vocab.encode(["zanzibar"]) == [UNK_ID]

    def test_ontology_tokens_present(self, tmp_path):
        vocab, _, _ = self.build(tmp_path)
        for tok in ("dontcare", "price", "range", "postcode", "inform", "request"):
            assert tok in vocab


class TestBuildInput:
    def test_action_tokens_precede_utterance(self):
        vocab = Vocabulary(["confirm", "food", "italian", "yes"])
        ids = build_input(vocab, [SystemAct("confirm", "food", "italian")], "yes")
        assert ids == [vocab.id("confirm"), vocab.id("food"), vocab.id("italian"), vocab.id("yes")]

    def test_first_turn_is_utterance_only(self):
        vocab = Vocabulary(["hello", "there"])
        assert build_input(vocab, [], "hello there") == [vocab.id("hello"), vocab.id("there")]

    def test_degenerate_turn_becomes_single_unknown(self):
        assert build_input(Vocabulary(), [], "") == [UNK_ID]

    def test_length_is_sum_of_parts(self):
        vocab = Vocabulary()
        acts = [SystemAct("inform", "price range", "moderate")]
        utt = "some words here ."
        ids = build_input(vocab, acts, utt)
        assert len(ids) == len(flatten_system_acts(acts)) + len(tokenize(utt))


class TestMakeBatches:
    def _examples(self, tmp_path, n=34):
        ont = toy_ontology()
        dialogues = load_dataset(write_corpus(tmp_path / "c.json", synth_raw_corpus(n)), ont)
        vocab = Vocabulary.build(dialogues, ont)
        return examples_from_dialogues(dialogues, vocab), ont

    def test_batch_size_arithmetic(self, tmp_path):
        examples, ont = self._examples(tmp_path)
        examples = examples[:101]
        batches = make_batches(examples, ont, 50)
        assert [b.size for b in batches] == [50, 50, 1]

    def test_same_seed_identical_order(self, tmp_path):
        examples, ont = self._examples(tmp_path)
        b1 = make_batches(examples, ont, 16, np.random.default_rng(5))
        b2 = make_batches(examples, ont, 16, np.random.default_rng(5))
        for x, y in zip(b1, b2):
            assert (x.token_ids == y.token_ids).all()

    def test_mask_count_equals_sum_of_lengths(self, tmp_path):
        examples, ont = self._examples(tmp_path)
        batches = make_batches(examples, ont, 13, np.random.default_rng(0))
        # brute-force recount over the produced batches
        assert sum(int(b.mask.sum()) for b in batches) == sum(
            len(ex.input_ids) for ex in examples
        )
        for b in batches:
            assert (b.mask.sum(axis=1) == b.lengths).all()
            assert (b.token_ids[~b.mask] == PAD_ID).all()

    def test_epoch_reconstructs_exact_multiset(self, tmp_path):
        examples, ont = self._examples(tmp_path)
        batches = make_batches(examples, ont, 7, np.random.default_rng(1))
        seen = sorted(
            tuple(row[:length]) for b in batches
            for row, length in zip(b.token_ids.tolist(), b.lengths.tolist())
        )
        expected = sorted(tuple(ex.input_ids) for ex in examples)
        assert seen == expected

    def test_bad_batch_size(self, tmp_path):
        examples, ont = self._examples(tmp_path, n=2)
        with pytest.raises(ConfigError):
            make_batches(examples, ont, 0)

    def test_labels_index_ontology_order(self, tmp_path):
        ont = toy_ontology()
        dialogues = load_dataset(write_corpus(tmp_path / "c.json", synth_raw_corpus(3)), ont)
        vocab = Vocabulary.build(dialogues, ont)
        examples = examples_from_dialogues(dialogues, vocab)
        batch = make_batches(examples, ont, 64)[0]
        for i, ex in enumerate(batch.examples):
            for slot, (idx, valid) in batch.informable_labels.items():
                gold = ex.turn.turn_goal.get(slot)
                if gold is None:
                    assert idx[i] == 0
                else:
                    assert valid[i]
                    assert ont.informable[slot][idx[i] - 1] == gold
            for j, r in enumerate(ont.requestable):
                assert batch.request_labels[i, j] == float(r in ex.turn.requests)


class TestPretrainedEmbeddings:
    def test_single_line_fixture(self):
        vocab = Vocabulary(["west", "east"])
        matrix, coverage = load_pretrained_embeddings(
            DATA_DIR / "vectors_toy.txt", vocab, 2, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(matrix[vocab.id("west")], [0.1, 0.2])
        # untouched rows keep the init policy scale
        assert (np.abs(matrix[vocab.id("east")]) <= 1 / np.sqrt(2)).all()

    def test_coverage_is_set_intersection(self):
        vocab = Vocabulary(["west", "east", "north"])  # 5 ids with reserved
        _, coverage = load_pretrained_embeddings(
            DATA_DIR / "vectors_toy.txt", vocab, 2, np.random.default_rng(0)
        )
        assert coverage == 1 / len(vocab)

    def test_padding_row_zero(self):
        vocab = Vocabulary(["west"])
        matrix, _ = load_pretrained_embeddings(
            DATA_DIR / "vectors_toy.txt", vocab, 2, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(matrix[PAD_ID], [0.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            load_pretrained_embeddings(
                DATA_DIR / "vectors_toy.txt", Vocabulary(["west"]), 3,
                np.random.default_rng(0),
            )
