"""Supervised text classifier in the fastText style, built from scratch.

Averaged embeddings over in-vocabulary words and hashed word n-grams, a
linear output layer with softmax loss, and plain SGD with a linearly
decaying learning rate. Inference goes through a precomputed
(input_rows x labels) logit table, which makes corpus scoring a gather of
|labels| floats per feature instead of a full embedding row.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .corpus import CorpusShard, RawDocument, ReadStats, read_shard
from .hashing import ngram_bucket_ids

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"FTXC"
MODEL_FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class ModelFormatError(Exception):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    dim: int = 256
    epochs: int = 3
    lr: float = 0.1
    max_ngram: int = 3
    min_count: int = 3
    buckets: int = 2_000_000
    labels: tuple[str, ...] = ("negative", "positive")
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not 1 <= self.max_ngram <= 5:
            raise ConfigurationError("max_ngram must be in 1..5")
        if self.min_count < 1:
            raise ConfigurationError("min_count must be >= 1")
        if self.buckets < 1:
            raise ConfigurationError("buckets must be >= 1")
        if len(self.labels) < 2:
            raise ConfigurationError("at least two labels required")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "epochs": self.epochs,
            "lr": self.lr,
            "max_ngram": self.max_ngram,
            "min_count": self.min_count,
            "buckets": self.buckets,
            "labels": list(self.labels),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**{**d, "labels": tuple(d["labels"])})


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: str


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def featurize(vocab: dict[str, int], config: ClassifierConfig, text: str) -> np.ndarray:
    """Feature row ids for a text: vocabulary word rows, then hashed n-gram rows.

    Out-of-vocabulary single words are dropped; n-grams are hashed over all
    tokens regardless of vocabulary membership.
    """
    toks = tokenize(text)
    word_ids = [vocab[t] for t in toks if t in vocab]
    ids = np.asarray(word_ids, dtype=np.int64)
    if config.max_ngram >= 2 and len(toks) >= 2:
        grams = ngram_bucket_ids(toks, config.max_ngram, config.buckets) + len(vocab)
        ids = np.concatenate([ids, grams]) if ids.size else grams
    return ids


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(eq=False)
class TextClassifier:
    config: ClassifierConfig
    vocab: dict[str, int]
    input_weights: np.ndarray  # (|vocab| + buckets, dim) float32
    output_weights: np.ndarray  # (|labels|, dim) float32
    epoch_losses: list[float] = field(default_factory=list)
    _projected: np.ndarray | None = field(default=None, repr=False)

    def featurize(self, text: str) -> np.ndarray:
        return featurize(self.vocab, self.config, text)

    def projected_logits(self) -> np.ndarray:
        """Per-row label logits: input_weights @ output_weights.T, cached."""
        if self._projected is None:
            self._projected = self.input_weights @ self.output_weights.T
        return self._projected

    def predict_proba(self, text: str) -> np.ndarray:
        """Softmax probabilities over labels (float64, sums to 1).

        Feature ids are reduced in sorted order, so any permutation of the
        input tokens yields bit-identical output.
        """
        ids = self.featurize(text)
        nlabels = len(self.config.labels)
        if ids.size == 0:
            return np.full(nlabels, 1.0 / nlabels)
        ids.sort()
        sums = self.projected_logits()[ids].sum(axis=0, dtype=np.float64)
        return _softmax64(sums / ids.size)

    def predict(self, text: str) -> tuple[str, float]:
        probs = self.predict_proba(text)
        idx = int(np.argmax(probs))  # ties break to the lowest label index
        return self.config.labels[idx], float(probs[idx])

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        words = sorted(self.vocab, key=self.vocab.__getitem__)
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", MODEL_FORMAT_VERSION))
            cfg = json.dumps(self.config.to_dict()).encode("utf-8")
            fh.write(struct.pack("<I", len(cfg)))
            fh.write(cfg)
            fh.write(struct.pack("<I", len(words)))
            for word in words:
                wb = word.encode("utf-8")
                fh.write(struct.pack("<I", len(wb)))
                fh.write(wb)
            for matrix in (self.input_weights, self.output_weights):
                rows, cols = matrix.shape
                fh.write(struct.pack("<QI", rows, cols))
                fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: Path | str) -> "TextClassifier":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MODEL_MAGIC:
                raise ModelFormatError(f"bad magic {magic!r}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != MODEL_FORMAT_VERSION:
                raise ModelFormatError(
                    f"unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})"
                )
            (cfg_len,) = struct.unpack("<I", fh.read(4))
            config = ClassifierConfig.from_dict(json.loads(fh.read(cfg_len).decode("utf-8")))
            (nwords,) = struct.unpack("<I", fh.read(4))
            vocab = {}
            for i in range(nwords):
                (wlen,) = struct.unpack("<I", fh.read(4))
                vocab[fh.read(wlen).decode("utf-8")] = i
            matrices = []
            for _ in range(2):
                rows, cols = struct.unpack("<QI", fh.read(12))
                data = fh.read(rows * cols * 4)
                if len(data) != rows * cols * 4:
                    raise ModelFormatError("truncated weight matrix")
                matrices.append(
                    np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float32)
                )
        return cls(config=config, vocab=vocab, input_weights=matrices[0], output_weights=matrices[1])


def build_vocab(examples: Iterable[LabeledExample], min_count: int) -> dict[str, int]:
    """Words with frequency >= min_count, rows ordered by (-count, word)."""
    counts: Counter[str] = Counter()
    for ex in examples:
        counts.update(tokenize(ex.text))
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return {w: i for i, w in enumerate(kept)}


def train(
    examples: list[LabeledExample],
    config: ClassifierConfig,
    workers: int = 1,
) -> TextClassifier:
    """Train a classifier with SGD over seed-shuffled examples.

    workers=1 is fully deterministic for a fixed config.seed. workers>1 runs
    lock-free parallel updates over shared weights (hogwild style): higher
    throughput, results vary run to run.
    """
    if not examples:
        raise ConfigurationError("no training examples")
    label_index = {label: i for i, label in enumerate(config.labels)}
    seen_labels = set()
    targets = []
    for ex in examples:
        if ex.label not in label_index:
            raise ConfigurationError(f"unknown label {ex.label!r}")
        targets.append(label_index[ex.label])
        seen_labels.add(ex.label)
    if len(seen_labels) < 2:
        raise ConfigurationError("training data must contain at least two labels")

    vocab = build_vocab(examples, config.min_count)
    nrows = len(vocab) + config.buckets
    rng = np.random.default_rng(config.seed)
    input_weights = rng.random((nrows, config.dim), dtype=np.float32)
    input_weights *= np.float32(2.0 / config.dim)
    input_weights -= np.float32(1.0 / config.dim)
    output_weights = np.zeros((len(config.labels), config.dim), dtype=np.float32)

    feats = [featurize(vocab, config, ex.text) for ex in examples]
    n = len(examples)
    total_steps = config.epochs * n
    epoch_losses: list[float] = []

    def run_steps(order: np.ndarray, step_base: int, acc: list[tuple[float, int]]) -> None:
        nonlocal output_weights
        loss_sum = 0.0
        loss_n = 0
        for local, idx in enumerate(order):
            ids = feats[idx]
            if ids.size == 0:
                continue
            lr_t = config.lr * (1.0 - (step_base + local) / total_steps)
            hidden = input_weights[ids].mean(axis=0)
            probs = _softmax64(output_weights @ hidden)
            loss_sum += -np.log(max(probs[targets[idx]], 1e-300))
            loss_n += 1
            grad = -probs
            grad[targets[idx]] += 1.0
            grad *= lr_t
            # Gradient w.r.t. hidden uses the pre-update output rows.
            grad_hidden = output_weights.T.astype(np.float64) @ grad
            output_weights += np.outer(grad, hidden).astype(np.float32)
            np.add.at(input_weights, ids, (grad_hidden / ids.size).astype(np.float32))
        acc.append((loss_sum, loss_n))

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        acc: list[tuple[float, int]] = []
        if workers <= 1:
            run_steps(order, epoch * n, acc)
        else:
            chunks = np.array_split(order, workers)
            threads = []
            offset = 0
            for chunk in chunks:
                t = threading.Thread(target=run_steps, args=(chunk, epoch * n + offset, acc))
                offset += len(chunk)
                threads.append(t)
                t.start()
            for t in threads:
                t.join()
        loss_sum = sum(pair[0] for pair in acc)
        loss_n = sum(pair[1] for pair in acc)
        epoch_losses.append(loss_sum / max(loss_n, 1))

    return TextClassifier(
        config=config,
        vocab=vocab,
        input_weights=input_weights,
        output_weights=output_weights,
        epoch_losses=epoch_losses,
    )


@dataclass
class RecallReport:
    """Counters filled while a scored stream is consumed."""

    docs_seen: int = 0
    docs_kept: int = 0
    tokens_kept: int = 0


def score_documents(
    model: TextClassifier,
    docs: Iterable[RawDocument],
    threshold: float,
    token_budget: float | None = None,
    positive_label: str = "positive",
    report: RecallReport | None = None,
) -> Iterator[RawDocument]:
    """Yield documents whose positive-class probability is >= threshold.

    Stops once the cumulative kept token count reaches the budget (the
    crossing document is kept). The report is final when the stream is
    exhausted.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    if report is None:
        report = RecallReport()
    pos = model.config.labels.index(positive_label)
    for doc in docs:
        report.docs_seen += 1
        if model.predict_proba(doc.content)[pos] >= threshold:
            report.docs_kept += 1
            report.tokens_kept += doc.token_count
            yield doc
            if token_budget is not None and report.tokens_kept >= token_budget:
                return


def score_corpus(
    model: TextClassifier,
    shards: list[CorpusShard],
    threshold: float,
    token_budget: float | None = None,
    positive_label: str = "positive",
    report: RecallReport | None = None,
    read_stats: ReadStats | None = None,
) -> tuple[Iterator[RawDocument], RecallReport]:
    """Recall documents from shards; returns (stream, report).

    The report fills as the stream is consumed and is final at exhaustion.
    """
    if report is None:
        report = RecallReport()

    def docs() -> Iterator[RawDocument]:
        for shard in shards:
            yield from read_shard(shard, stats=read_stats)

    stream = score_documents(
        model, docs(), threshold, token_budget=token_budget,
        positive_label=positive_label, report=report,
    )
    return stream, report
