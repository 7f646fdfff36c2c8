"""Unify refined pairs into multi-turn SFT records, label subjects, compute
dataset statistics, and emit seeded audit samples for human review."""

from __future__ import annotations

import csv
import io
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence
from urllib.parse import urlsplit

from .corpus import count_tokens, root_domain
from .errors import IntegrityError
from .extract import QACandidate
from .llmclient import LlmError
from .refine import RefinedQA

logger = logging.getLogger(__name__)

SUBJECTS = (
    "Mathematics",
    "Physics",
    "Chemistry",
    "Biology",
    "Business",
    "Art & Design",
    "Health & Medicine",
    "Other",
)

FORUM_PATTERNS = ("forum", "thread", "/t/", "community", "discussion", "stackexchange", "reddit")

AUDIT_RUBRIC = "rate each row as one of: improved | neutral | worse | hallucination"


@dataclass
class SftRecord:
    id: str
    conversations: list[dict]
    metadata: dict

    def validate(self) -> None:
        if not self.conversations:
            raise ValueError(f"{self.id}: empty conversations")
        for i, turn in enumerate(self.conversations):
            expected = "human" if i % 2 == 0 else "gpt"
            if turn.get("from") != expected:
                raise ValueError(f"{self.id}: turn {i} must be from {expected!r}")
            if not turn.get("value"):
                raise ValueError(f"{self.id}: turn {i} has an empty value")

    def to_dict(self) -> dict:
        return {"id": self.id, "conversations": self.conversations, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "SftRecord":
        return cls(d["id"], d["conversations"], d["metadata"])


def to_sft(pair: RefinedQA, subject: str | None = None) -> SftRecord:
    """Two alternating turns (human question, gpt answer) plus provenance."""
    metadata = {
        "source_url": pair.url,
        "domain": pair.domain,
        "refiner": pair.refiner,
        "extractor": pair.extractor,
    }
    if subject is not None:
        metadata["subject"] = subject
    record = SftRecord(
        id=pair.candidate_id,
        conversations=[
            {"from": "human", "value": pair.question},
            {"from": "gpt", "value": pair.answer},
        ],
        metadata=metadata,
    )
    record.validate()
    return record


def _subject_prompt(question: str) -> list[dict]:
    names = ", ".join(SUBJECTS)
    content = (
        f"Classify the subject of the question below into exactly one of: {names}.\n"
        f"Question: {question}\n"
        "Reply with the subject name only."
    )
    return [{"role": "user", "content": content}]


def label_subject(llm, pair: RefinedQA, counters: dict | None = None) -> str:
    """Best-effort subject label; anything unrecognized collapses to Other."""
    if counters is None:
        counters = {}
    try:
        exchange = llm.cached_complete(_subject_prompt(pair.question))
    except LlmError:
        counters["label_errors"] = counters.get("label_errors", 0) + 1
        return "Other"
    answer = (exchange.response_text or "").strip().rstrip(".").casefold()
    for subject in SUBJECTS:
        if answer == subject.casefold():
            return subject
    counters["label_no_match"] = counters.get("label_no_match", 0) + 1
    return "Other"


def classify_source(url: str) -> str:
    """"forum" iff the host or path matches the forum pattern list, else "education"."""
    try:
        host = root_domain(url)
    except ValueError:
        host = ""
    path = urlsplit(url).path.lower()
    haystacks = (host, path)
    for pattern in FORUM_PATTERNS:
        if any(pattern in h for h in haystacks):
            return "forum"
    return "education"


@dataclass
class DatasetStats:
    pair_count: int = 0
    token_count: int = 0
    per_domain: dict[str, int] = field(default_factory=dict)
    per_subject: dict[str, int] = field(default_factory=dict)
    per_source: dict[str, int] = field(default_factory=dict)

    def to_dict(self, top_domains: int | None = None) -> dict:
        domains = sorted(self.per_domain.items(), key=lambda kv: (-kv[1], kv[0]))
        if top_domains is not None:
            domains = domains[:top_domains]
        return {
            "pair_count": self.pair_count,
            "token_count": self.token_count,
            "per_domain": dict(sorted(self.per_domain.items())),
            "top_domains": [list(kv) for kv in domains],
            "per_subject": dict(sorted(self.per_subject.items())),
            "per_source": dict(sorted(self.per_source.items())),
        }

    def format_table(self, top_domains: int = 20) -> str:
        lines = [
            f"pairs: {self.pair_count}",
            f"tokens: {self.token_count}",
            "",
            "top domains:",
        ]
        ranked = sorted(self.per_domain.items(), key=lambda kv: (-kv[1], kv[0]))[:top_domains]
        width = max((len(d) for d, _ in ranked), default=6)
        for domain, count in ranked:
            lines.append(f"  {domain:<{width}}  {count}")
        if self.per_subject:
            lines += ["", "subjects:"]
            for subject, count in sorted(self.per_subject.items(), key=lambda kv: (-kv[1], kv[0])):
                lines.append(f"  {subject:<18} {count}")
        lines += ["", "sources:"]
        for source, count in sorted(self.per_source.items()):
            lines.append(f"  {source:<10} {count}")
        return "\n".join(lines) + "\n"


def compute_stats(records: Iterable[SftRecord]) -> DatasetStats:
    """Single pass over the dataset accumulating the reported counts."""
    stats = DatasetStats()
    for record in records:
        stats.pair_count += 1
        stats.token_count += count_tokens(" ".join(t["value"] for t in record.conversations))
        domain = record.metadata.get("domain", "")
        stats.per_domain[domain] = stats.per_domain.get(domain, 0) + 1
        subject = record.metadata.get("subject")
        if subject is not None:
            stats.per_subject[subject] = stats.per_subject.get(subject, 0) + 1
        source = classify_source(record.metadata.get("source_url", ""))
        stats.per_source[source] = stats.per_source.get(source, 0) + 1
    return stats


@dataclass
class AuditSample:
    rows: list[dict]
    seed: int
    size: int

    def to_csv(self) -> str:
        """RFC-4180 CSV (CRLF line endings), rubric in a leading comment."""
        buf = io.StringIO()
        buf.write(f"# {AUDIT_RUBRIC}\r\n")
        writer = csv.DictWriter(
            buf,
            fieldnames=[
                "id",
                "extracted_question",
                "extracted_answer",
                "refined_question",
                "refined_answer",
                "rating",
            ],
            lineterminator="\r\n",
        )
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()


def sample_audit(
    candidates: Mapping[str, QACandidate] | Sequence[QACandidate],
    refined: Sequence[RefinedQA],
    n: int = 50,
    seed: int = 0,
) -> AuditSample:
    """Seeded uniform sample (without replacement) of refined pairs alongside
    their extracted originals, as blank-rating audit rows."""
    if not isinstance(candidates, Mapping):
        candidates = {c.candidate_id: c for c in candidates}
    if n > len(refined):
        raise ValueError(f"sample size {n} exceeds pair count {len(refined)}")
    ordered = sorted(refined, key=lambda r: r.candidate_id)
    missing = [r.candidate_id for r in ordered if r.candidate_id not in candidates]
    if missing:
        raise IntegrityError(f"refined ids without a candidate: {missing[:5]}")
    chosen = random.Random(seed).sample(ordered, n)
    rows = []
    for pair in chosen:
        cand = candidates[pair.candidate_id]
        rows.append(
            {
                "id": pair.candidate_id,
                "extracted_question": cand.question,
                "extracted_answer": cand.answer,
                "refined_question": pair.question,
                "refined_answer": pair.answer,
                "rating": "",
            }
        )
    return AuditSample(rows=rows, seed=seed, size=n)
