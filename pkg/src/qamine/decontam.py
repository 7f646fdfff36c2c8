"""Benchmark decontamination via word n-gram matching, plus exact dedup.

The index stores normalized n-gram strings (the source of truth) alongside
sorted integer window keys used as a prefilter: token-level FNV hashes are
combined polynomially over each window, candidate hits are then verified
against the string table, so collisions can cost time but never correctness.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import PipelineError
from .hashing import token_fnv64, window_key_py, window_keys
from .ioutil import iter_jsonl
from .refine import RefinedQA

logger = logging.getLogger(__name__)

DEFAULT_NGRAM_ORDER = 10

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize(text: str) -> list[str]:
    """Lowercase, ASCII punctuation replaced by spaces, whitespace split."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass
class BenchmarkIndex:
    n: int = DEFAULT_NGRAM_ORDER
    grams: dict[str, str] = field(default_factory=dict)  # n-gram -> benchmark name
    short_entries: dict[str, str] = field(default_factory=dict)  # whole entry -> benchmark
    source_counts: dict[str, int] = field(default_factory=dict)
    skipped_entries: int = 0
    _gram_keys: np.ndarray | None = field(default=None, repr=False)
    _short_keys: dict[int, np.ndarray] | None = field(default=None, repr=False)

    def add_entry(self, question: str, answer: str, benchmark: str) -> None:
        for tokens in (normalize(question), normalize(answer)):
            if not tokens:
                continue
            if len(tokens) < self.n:
                self.short_entries.setdefault(" ".join(tokens), benchmark)
            else:
                for i in range(len(tokens) - self.n + 1):
                    self.grams.setdefault(" ".join(tokens[i : i + self.n]), benchmark)
        self.source_counts[benchmark] = self.source_counts.get(benchmark, 0) + 1
        self._gram_keys = None
        self._short_keys = None

    def finalize(self) -> None:
        """Build the integer prefilter tables; called lazily if skipped."""
        self._gram_keys = np.sort(
            np.array(
                [window_key_py(g.split(" ")) for g in self.grams],
                dtype=np.uint64,
            )
        )
        short_by_len: dict[int, list[int]] = {}
        for entry in self.short_entries:
            toks = entry.split(" ")
            short_by_len.setdefault(len(toks), []).append(window_key_py(toks))
        self._short_keys = {
            length: np.sort(np.array(keys, dtype=np.uint64))
            for length, keys in short_by_len.items()
        }

    def _tables(self) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        if self._gram_keys is None or self._short_keys is None:
            self.finalize()
        return self._gram_keys, self._short_keys


def build_index(benchmark_files: Iterable[Path | str], n: int = DEFAULT_NGRAM_ORDER) -> BenchmarkIndex:
    """Index every n-gram of normalized questions and answers.

    Entries shorter than n tokens are kept whole in short_entries. Entries
    missing a question or answer field are skipped and counted.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    index = BenchmarkIndex(n=n)
    for path in benchmark_files:
        path = Path(path)
        for row in iter_jsonl(path):
            question = row.get("question")
            answer = row.get("answer")
            if not isinstance(question, str) or not isinstance(answer, str):
                index.skipped_entries += 1
                continue
            benchmark = row.get("benchmark") or path.stem
            index.add_entry(question, answer, benchmark)
    index.finalize()
    return index


def _sorted_membership(keys: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Positions in `keys` whose value occurs in the sorted `table`."""
    if keys.size == 0 or table.size == 0:
        return np.empty(0, np.int64)
    idx = np.searchsorted(table, keys)
    idx[idx == table.size] = 0
    hits = table[idx] == keys
    if not hits.any():
        return np.empty(0, np.int64)
    return np.flatnonzero(hits)


def is_contaminated(index: BenchmarkIndex, text: str) -> tuple[bool, str | None, str | None]:
    """True iff any n-gram of the text is indexed, or a short benchmark entry
    occurs as a contiguous token subsequence. Returns (flag, match, benchmark)."""
    tokens = normalize(text)
    if not tokens:
        return False, None, None
    gram_table, short_tables = index._tables()
    hashes = token_fnv64(tokens)

    keys = window_keys(hashes, index.n)
    for pos in _sorted_membership(keys, gram_table):
        gram = " ".join(tokens[pos : pos + index.n])
        benchmark = index.grams.get(gram)
        if benchmark is not None:
            return True, gram, benchmark

    for length, table in short_tables.items():
        if length > len(tokens):
            continue
        keys = window_keys(hashes, length)
        for pos in _sorted_membership(keys, table):
            entry = " ".join(tokens[pos : pos + length])
            benchmark = index.short_entries.get(entry)
            if benchmark is not None:
                return True, entry, benchmark
    return False, None, None


@dataclass
class ContaminationReport:
    checked: int = 0
    dropped: int = 0
    fallbacks: int = 0  # source-page scope pairs checked by pair text instead
    matches: list[tuple[str, str, str]] = field(default_factory=list)  # (pair id, gram, benchmark)
    matches_cap: int = 100

    def record(self, pair_id: str, gram: str, benchmark: str) -> None:
        self.dropped += 1
        if len(self.matches) < self.matches_cap:
            self.matches.append((pair_id, gram, benchmark))

    def to_dict(self) -> dict:
        return {
            "checked": self.checked,
            "dropped": self.dropped,
            "fallbacks": self.fallbacks,
            "matches": [list(m) for m in self.matches],
        }


def filter_contaminated(
    index: BenchmarkIndex,
    pairs: Iterable[RefinedQA],
    scope: str = "source-page",
    source_texts: Mapping[str, str] | None = None,
    report: ContaminationReport | None = None,
) -> tuple[list[RefinedQA], ContaminationReport]:
    """Drop contaminated pairs.

    source-page scope (the default) drops every pair whose originating page
    text is contaminated; a pair whose source document is missing falls back
    to a pair-text check, with a counter. pair-text scope checks only
    question + answer.
    """
    if scope not in ("source-page", "pair-text"):
        raise ValueError(f"unknown scope {scope!r}")
    if scope == "source-page" and source_texts is None:
        raise ValueError("source-page scope requires source_texts")
    if report is None:
        report = ContaminationReport()
    kept = []
    page_verdicts: dict[str, tuple[bool, str | None, str | None]] = {}
    for pair in pairs:
        report.checked += 1
        if scope == "source-page" and pair.doc_id in (source_texts or {}):
            if pair.doc_id not in page_verdicts:
                page_verdicts[pair.doc_id] = is_contaminated(index, source_texts[pair.doc_id])
            flag, gram, benchmark = page_verdicts[pair.doc_id]
        else:
            if scope == "source-page":
                report.fallbacks += 1
            flag, gram, benchmark = is_contaminated(index, pair.question + "\n" + pair.answer)
        if flag:
            report.record(pair.candidate_id, gram or "", benchmark or "")
        else:
            kept.append(pair)
    return kept, report


def dedup(pairs: Iterable[RefinedQA]) -> tuple[list[RefinedQA], int]:
    """Exact dedup on normalized question/answer; first candidate_id wins."""
    ordered = sorted(pairs, key=lambda p: p.candidate_id)
    seen: set[str] = set()
    unique = []
    duplicates = 0
    for pair in ordered:
        key = " ".join(normalize(pair.question)) + "§" + " ".join(normalize(pair.answer))
        if key in seen:
            duplicates += 1
        else:
            seen.add(key)
            unique.append(pair)
    return unique, duplicates
