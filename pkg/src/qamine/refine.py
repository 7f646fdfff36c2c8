"""LLM refinement of extracted Q-A pairs and merging of the two refiner streams.

Each candidate is routed to exactly one of two refiner endpoints by a seeded
hash split. A refinement that fails to parse falls back to the unrefined
pair, so the output count always equals the input count.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import root_domain
from .errors import IntegrityError, PipelineError
from .extract import QACandidate, parse_extraction

logger = logging.getLogger(__name__)


class RefinementError(PipelineError):
    def __init__(self, message: str, completed: list["RefinedQA"] | None = None):
        super().__init__(message)
        self.completed = completed or []


@dataclass(frozen=True)
class RefinedQA:
    candidate_id: str
    doc_id: str
    url: str
    domain: str
    question: str
    answer: str
    refiner: str
    extractor: str

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "doc_id": self.doc_id,
            "url": self.url,
            "domain": self.domain,
            "question": self.question,
            "answer": self.answer,
            "refiner": self.refiner,
            "extractor": self.extractor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefinedQA":
        return cls(
            d["candidate_id"], d["doc_id"], d["url"], d["domain"],
            d["question"], d["answer"], d["refiner"], d["extractor"],
        )


@dataclass
class MergeReport:
    total: int
    per_refiner: dict[str, int]

    def to_dict(self) -> dict:
        return {"total": self.total, "per_refiner": self.per_refiner}


def assign_refiner(candidate_id: str, seed: int, split: float = 0.5) -> int:
    """Deterministically route a candidate to endpoint 0 or 1.

    Index 0 iff the hashed (candidate_id, seed) value, mapped to [0, 1),
    falls below `split`. Stable across runs and processes.
    """
    if not 0.0 <= split <= 1.0:
        raise ValueError("split must be in [0, 1]")
    digest = hashlib.blake2b(f"{candidate_id}\x1f{seed}".encode("utf-8"), digest_size=8).digest()
    u = int.from_bytes(digest, "big") / 2**64
    return 0 if u < split else 1


def load_refinement_template(path: Path | str | None = None) -> str:
    """Prompt template with {question} and {answer} placeholders."""
    if path is None:
        raw = resources.files("qamine").joinpath("prompts/refinement.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    return json.loads(raw)["template"]


def _render_prompt(template: str, candidate: QACandidate) -> list[dict]:
    content = template.replace("{question}", candidate.question).replace("{answer}", candidate.answer)
    return [{"role": "user", "content": content}]


def _refine_one(llm, candidate: QACandidate, template: str) -> tuple["RefinedQA", bool]:
    """Returns (refined, fell_back)."""
    exchange = llm.cached_complete(_render_prompt(template, candidate))
    pairs, _ = parse_extraction(exchange.response_text or "", void_sentinel="\x00never\x00")
    if len(pairs) == 1:
        question, answer = pairs[0]
        fell_back = False
    else:
        question, answer = candidate.question, candidate.answer
        fell_back = True
    return (
        RefinedQA(
            candidate_id=candidate.candidate_id,
            doc_id=candidate.doc_id,
            url=candidate.url,
            domain=root_domain(candidate.url),
            question=question,
            answer=answer,
            refiner=llm.endpoint.model,
            extractor=candidate.extractor,
        ),
        fell_back,
    )


def refine_qa(llm, candidate: QACandidate, template: str) -> RefinedQA:
    """Refine one candidate; a parse failure keeps the unrefined pair."""
    refined, _ = _refine_one(llm, candidate, template)
    return refined


def refine_pool(
    clients: tuple,
    candidates: list[QACandidate],
    template: str,
    seed: int,
    split: float = 0.5,
    counters: dict | None = None,
) -> tuple[list[RefinedQA], list[RefinedQA]]:
    """Refine a candidate pool across the two endpoints by seeded split.

    Returns the two per-endpoint streams (inputs preserved 1:1, fallbacks
    included). `counters` picks up "fallbacks" and per-endpoint call counts.
    """
    if counters is None:
        counters = {}
    assigned: list[list[QACandidate]] = [[], []]
    for cand in candidates:
        assigned[assign_refiner(cand.candidate_id, seed, split)].append(cand)

    streams: list[list[RefinedQA]] = [[], []]
    for idx, (llm, group) in enumerate(zip(clients, assigned)):
        if not group:
            continue
        workers = max(1, min(getattr(llm.endpoint, "max_in_flight", 1), len(group)))
        try:
            if workers == 1:
                results = [_refine_one(llm, c, template) for c in group]
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda c: _refine_one(llm, c, template), group))
        except Exception as exc:
            done = streams[0] + streams[1]
            raise RefinementError(f"refinement failed on endpoint {idx}: {exc}", completed=done) from exc
        for refined, fell_back in results:
            streams[idx].append(refined)
            if fell_back:
                counters["fallbacks"] = counters.get("fallbacks", 0) + 1
        counters[f"endpoint_{idx}_calls"] = counters.get(f"endpoint_{idx}_calls", 0) + len(group)
    return streams[0], streams[1]


def merge_refined(
    stream_a: list[RefinedQA],
    stream_b: list[RefinedQA],
    allow_shared_ids: bool = False,
) -> tuple[list[RefinedQA], MergeReport]:
    """Concatenate the two refined streams, sorted by candidate_id.

    Duplicate candidate_ids across streams are an integrity error unless
    allow_shared_ids is set (the run-both-refiners-over-everything mode).
    """
    if not allow_shared_ids:
        shared = {r.candidate_id for r in stream_a} & {r.candidate_id for r in stream_b}
        if shared:
            sample = sorted(shared)[:5]
            raise IntegrityError(f"candidate ids refined by both endpoints: {sample}")
    merged = sorted(stream_a + stream_b, key=lambda r: (r.candidate_id, r.refiner))
    per_refiner: dict[str, int] = {}
    for r in merged:
        per_refiner[r.refiner] = per_refiner.get(r.refiner, 0) + 1
    return merged, MergeReport(total=len(merged), per_refiner=per_refiner)
