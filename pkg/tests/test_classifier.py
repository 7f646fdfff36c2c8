import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import separable_examples, write_jsonl
from qamine.classifier import (
    ClassifierConfig,
    ConfigurationError,
    LabeledExample,
    ModelFormatError,
    RecallReport,
    TextClassifier,
    featurize,
    score_corpus,
    score_documents,
    train,
)
from qamine.corpus import CorpusShard, make_document, read_shard
from qamine.hashing import fnv1a_64

SMALL = dict(dim=32, buckets=2000, seed=11)


@pytest.fixture(scope="module")
def separable_model():
    examples = separable_examples(100, seed=1)  # 200 docs
    config = ClassifierConfig(dim=64, buckets=5000, seed=7)
    return train(examples, config), examples


class TestConfig:
    def test_paper_defaults(self):
        cfg = ClassifierConfig()
        assert (cfg.dim, cfg.epochs, cfg.lr, cfg.max_ngram, cfg.min_count) == (256, 3, 0.1, 3, 3)
        assert cfg.labels == ("negative", "positive")

    @pytest.mark.parametrize(
        "kwargs",
        [dict(dim=0), dict(epochs=0), dict(lr=0.0), dict(max_ngram=0), dict(max_ngram=6),
         dict(min_count=0), dict(buckets=0), dict(labels=("only",))],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            ClassifierConfig(**kwargs)


class TestFeaturize:
    def test_unigram_only(self):
        cfg = ClassifierConfig(max_ngram=1, **SMALL)
        ids = featurize({"a": 0, "b": 1}, cfg, "a b")
        assert ids.tolist() == [0, 1]

    def test_three_token_ngrams_empty_vocab(self):
        cfg = ClassifierConfig(max_ngram=3, **SMALL)
        ids = featurize({}, cfg, "x y z")
        assert len(ids) == 3  # "x y", "y z", "x y z"
        expected = [
            fnv1a_64(b"x y") % cfg.buckets,
            fnv1a_64(b"y z") % cfg.buckets,
            fnv1a_64(b"x y z") % cfg.buckets,
        ]
        assert ids.tolist() == expected

    def test_ten_token_sentence_matches_enumerator(self):
        cfg = ClassifierConfig(max_ngram=3, **SMALL)
        sentence = "one two three four five six seven eight nine ten"
        toks = sentence.split()
        vocab = {"two": 0, "nine": 1}
        ids = featurize(vocab, cfg, sentence)
        expected = [0, 1]
        for n in (2, 3):
            for i in range(len(toks) - n + 1):
                gram = " ".join(toks[i : i + n])
                expected.append(len(vocab) + fnv1a_64(gram.encode()) % cfg.buckets)
        assert sorted(ids.tolist()) == sorted(expected)

    def test_oov_words_dropped_lowercased(self):
        cfg = ClassifierConfig(max_ngram=1, **SMALL)
        ids = featurize({"known": 3}, cfg, "KNOWN unknown")
        assert ids.tolist() == [3]

    @given(st.text())
    @settings(max_examples=150, deadline=None)
    def test_ids_always_in_range(self, text):
        cfg = ClassifierConfig(max_ngram=3, **SMALL)
        vocab = {"a": 0, "b": 1, "c": 2}
        ids = featurize(vocab, cfg, text)
        assert ((ids >= 0) & (ids < len(vocab) + cfg.buckets)).all()


class TestTrain:
    def test_separable_accuracy(self, separable_model):
        model, examples = separable_model
        correct = sum(model.predict(e.text)[0] == e.label for e in examples)
        assert correct / len(examples) >= 0.99

    def test_heldout_accuracy(self, separable_model):
        model, _ = separable_model
        heldout = separable_examples(25, seed=999)  # 50 unseen docs
        correct = sum(model.predict(e.text)[0] == e.label for e in heldout)
        assert correct / len(heldout) >= 0.95

    def test_deterministic_retrain_bit_identical(self):
        examples = separable_examples(20, seed=3)
        config = ClassifierConfig(**SMALL)
        a = train(examples, config)
        b = train(examples, config)
        assert np.array_equal(a.input_weights, b.input_weights)
        assert np.array_equal(a.output_weights, b.output_weights)

    def test_epoch_losses_non_increasing_on_separable(self, separable_model):
        model, _ = separable_model
        losses = model.epoch_losses
        assert all(losses[i + 1] <= losses[i] for i in range(len(losses) - 1))

    def test_single_label_rejected(self):
        examples = [LabeledExample("a b c", "positive")] * 5
        with pytest.raises(ConfigurationError):
            train(examples, ClassifierConfig(**SMALL))

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            train([], ClassifierConfig(**SMALL))

    def test_min_count_excludes_rare_words(self):
        examples = [
            LabeledExample("common common common rare", "positive"),
            LabeledExample("common common common", "negative"),
        ]
        model = train(examples, ClassifierConfig(min_count=3, **SMALL))
        assert "common" in model.vocab
        assert "rare" not in model.vocab

    def test_hogwild_mode_still_learns(self):
        examples = separable_examples(100, seed=5)
        model = train(examples, ClassifierConfig(dim=64, buckets=5000, seed=11), workers=4)
        correct = sum(model.predict(e.text)[0] == e.label for e in examples)
        assert correct / len(examples) >= 0.95


class TestPredict:
    def test_zero_output_weights_uniform(self):
        cfg = ClassifierConfig(**SMALL)
        model = TextClassifier(
            config=cfg,
            vocab={"a": 0},
            input_weights=np.ones((1 + cfg.buckets, cfg.dim), np.float32),
            output_weights=np.zeros((2, cfg.dim), np.float32),
        )
        label, prob = model.predict("a word")
        assert prob == pytest.approx(0.5)
        assert label == "negative"  # tie breaks to lowest label index

    def test_empty_features_uniform_argmax(self, separable_model):
        model, _ = separable_model
        probs = model.predict_proba("")
        assert probs.tolist() == [0.5, 0.5]
        assert model.predict("")[0] == "negative"

    def test_probability_simplex(self, separable_model):
        model, _ = separable_model
        rng = np.random.default_rng(0)
        vocab_words = list(model.vocab)
        for _ in range(200):
            words = rng.choice(vocab_words + ["zzz", "qqq"], size=rng.integers(1, 20))
            probs = model.predict_proba(" ".join(words))
            assert abs(probs.sum() - 1.0) < 1e-6
            assert ((probs >= 0) & (probs <= 1)).all()

    def test_bag_of_words_order_invariance(self):
        examples = separable_examples(20, seed=3)
        model = train(examples, ClassifierConfig(max_ngram=1, **SMALL))
        a = model.predict_proba("quizword1 quizword2 plainword3")
        b = model.predict_proba("plainword3 quizword2 quizword1")
        assert np.array_equal(a, b)

    def test_output_scaling_preserves_argmax(self, separable_model):
        model, examples = separable_model
        import dataclasses

        scaled = dataclasses.replace(model, output_weights=model.output_weights * 7.0, _projected=None)
        for e in examples[:20]:
            assert model.predict(e.text)[0] == scaled.predict(e.text)[0]


class TestModelFile:
    def test_roundtrip(self, tmp_path, separable_model):
        model, examples = separable_model
        path = tmp_path / "model.ftxc"
        model.save(path)
        loaded = TextClassifier.load(path)
        assert loaded.config == model.config
        assert loaded.vocab == model.vocab
        assert np.array_equal(loaded.input_weights, model.input_weights)
        for e in examples[:10]:
            assert loaded.predict(e.text) == model.predict(e.text)

    def test_version_mismatch_rejected(self, tmp_path, separable_model):
        model, _ = separable_model
        path = tmp_path / "model.ftxc"
        model.save(path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(ModelFormatError):
            TextClassifier.load(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ftxc"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ModelFormatError):
            TextClassifier.load(path)


class TestScoring:
    def _docs(self, model):
        docs = []
        for i, ex in enumerate(separable_examples(50, seed=42)):
            docs.append(make_document(f"https://site{i % 7}.com/{i}", ex.text))
        return docs

    def test_threshold_zero_keeps_all(self, separable_model):
        model, _ = separable_model
        docs = self._docs(model)
        kept = list(score_documents(model, docs, threshold=0.0))
        assert len(kept) == len(docs)

    def test_threshold_one_keeps_none(self, separable_model):
        model, _ = separable_model
        docs = self._docs(model)
        kept = list(score_documents(model, docs, threshold=1.0))
        assert kept == []  # probabilities are strictly below 1

    def test_kept_set_matches_predict_loop(self, separable_model, tmp_path):
        model, _ = separable_model
        docs = self._docs(model)
        write_jsonl(tmp_path / "s.jsonl", [{"url": d.url, "html": d.html} for d in docs])
        shard = CorpusShard(tmp_path / "s.jsonl", "jsonl")

        stream, report = score_corpus(model, [shard], threshold=0.5)
        kept_ids = [d.id for d in stream]

        pos = model.config.labels.index("positive")
        oracle_ids = [
            d.id for d in read_shard(shard) if model.predict_proba(d.content)[pos] >= 0.5
        ]
        assert kept_ids == oracle_ids
        assert report.docs_seen == len(docs)
        assert report.docs_kept == len(oracle_ids)

    def test_token_budget_stops_stream(self, separable_model):
        model, _ = separable_model
        docs = self._docs(model)
        report = RecallReport()
        kept = list(score_documents(model, docs, threshold=0.0, token_budget=100, report=report))
        assert report.tokens_kept >= 100
        assert len(kept) < len(docs)
        without_budget = list(score_documents(model, docs, threshold=0.0))
        assert [d.id for d in kept] == [d.id for d in without_budget[: len(kept)]]
