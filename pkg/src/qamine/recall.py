"""Two-round recall: domain grouping, LLM domain triage, round-2 retraining.

Round 1 trains on the seed examples and recalls a first pool whose only use
is to build the round-2 training set (those documents are not kept as
output). Round 2 retrains, recalls again, and restricts the pool to domains
kept by a second triage pass.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .classifier import ClassifierConfig, LabeledExample, RecallReport, TextClassifier, score_documents, train
from .corpus import CorpusShard, RawDocument, read_shard, root_domain
from .errors import PipelineError

logger = logging.getLogger(__name__)

DEFAULT_MIN_DOCS = 1000
MAX_SAMPLE_URLS = 5
MAX_SAMPLE_SNIPPETS = 3
SNIPPET_CHARS = 500


class RecallStageError(PipelineError):
    pass


class TriageError(PipelineError):
    """Judge endpoint failed; carries verdicts completed so far for resume."""

    def __init__(self, message: str, completed: list["DomainVerdict"] | None = None):
        super().__init__(message)
        self.completed = completed or []


@dataclass
class DomainStats:
    domain: str
    doc_count: int = 0
    token_count: int = 0
    sample_urls: list[str] = field(default_factory=list)
    sample_snippets: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "doc_count": self.doc_count,
            "token_count": self.token_count,
            "sample_urls": self.sample_urls,
            "sample_snippets": self.sample_snippets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainStats":
        return cls(d["domain"], d["doc_count"], d["token_count"], d["sample_urls"], d["sample_snippets"])


@dataclass(frozen=True)
class DomainVerdict:
    domain: str
    keep: bool
    rationale: str
    judge: str

    def to_dict(self) -> dict:
        return {"domain": self.domain, "keep": self.keep, "rationale": self.rationale, "judge": self.judge}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainVerdict":
        return cls(d["domain"], d["keep"], d["rationale"], d["judge"])


@dataclass
class RecallRoundReport:
    round: int
    docs_recalled: int = 0
    tokens_recalled: int = 0
    domains_total: int = 0
    domains_kept: int = 0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "docs_recalled": self.docs_recalled,
            "tokens_recalled": self.tokens_recalled,
            "domains_total": self.domains_total,
            "domains_kept": self.domains_kept,
        }


@dataclass
class GroupingResult:
    retained: list[DomainStats]
    dropped_domains: int
    dropped_docs: int
    total_docs: int


def group_by_domain(docs: Iterable[RawDocument], min_docs: int = DEFAULT_MIN_DOCS) -> GroupingResult:
    """Group documents by root domain; retain domains with MORE than min_docs
    documents (strict). Samples are first-seen, so grouping is deterministic."""
    if min_docs < 1:
        raise ValueError("min_docs must be >= 1")
    stats: dict[str, DomainStats] = {}
    total = 0
    for doc in docs:
        total += 1
        domain = root_domain(doc.url)
        entry = stats.get(domain)
        if entry is None:
            entry = stats[domain] = DomainStats(domain=domain)
        entry.doc_count += 1
        entry.token_count += doc.token_count
        if len(entry.sample_urls) < MAX_SAMPLE_URLS:
            entry.sample_urls.append(doc.url)
        if len(entry.sample_snippets) < MAX_SAMPLE_SNIPPETS:
            entry.sample_snippets.append(doc.content[:SNIPPET_CHARS])
    retained = sorted(
        (s for s in stats.values() if s.doc_count > min_docs), key=lambda s: s.domain
    )
    dropped = [s for s in stats.values() if s.doc_count <= min_docs]
    return GroupingResult(
        retained=retained,
        dropped_domains=len(dropped),
        dropped_docs=sum(s.doc_count for s in dropped),
        total_docs=total,
    )


TRIAGE_PREAMBLE = """\
You review website domains mined from a web crawl. Decide for each domain
whether it is likely to contain educational question-and-answer material
(exam problems, quizzes, solved exercises, homework help, technical forums).

Reply with one line per domain, in exactly this tab-separated format:
<domain>\tKEEP or DROP\t<one-line reason>
"""


def render_triage_prompt(batch: Sequence[DomainStats]) -> list[dict]:
    lines = [TRIAGE_PREAMBLE, "Domains:"]
    for s in batch:
        lines.append(f"- domain: {s.domain} | documents: {s.doc_count} | tokens: {s.token_count}")
        for url in s.sample_urls:
            lines.append(f"  url: {url}")
        for snippet in s.sample_snippets:
            lines.append("  snippet: " + " ".join(snippet.split())[:SNIPPET_CHARS])
    return [{"role": "user", "content": "\n".join(lines)}]


def parse_triage_response(response: str, batch: Sequence[DomainStats], judge: str) -> list[DomainVerdict]:
    """Parse the domain<TAB>KEEP|DROP<TAB>rationale grammar.

    Lines that do not parse, and batch domains missing from the response,
    default to DROP with rationale "parse-failure".
    """
    batch_domains = {s.domain for s in batch}
    parsed: dict[str, DomainVerdict] = {}
    for line in response.splitlines():
        parts = line.split("\t")
        if len(parts) < 2:
            continue
        domain = parts[0].strip()
        if domain not in batch_domains or domain in parsed:
            continue
        decision = parts[1].strip().upper()
        if decision not in ("KEEP", "DROP"):
            parsed[domain] = DomainVerdict(domain, False, "parse-failure", judge)
            continue
        rationale = parts[2].strip() if len(parts) > 2 and parts[2].strip() else "(none given)"
        parsed[domain] = DomainVerdict(domain, decision == "KEEP", rationale, judge)
    return [
        parsed.get(s.domain, DomainVerdict(s.domain, False, "parse-failure", judge))
        for s in batch
    ]


def triage_domains(judge, stats: list[DomainStats], batch_size: int = 20) -> list[DomainVerdict]:
    """Ask the judge endpoint KEEP/DROP for each domain, in batches.

    The verdict list is a permutation of the input domains. A batch whose
    response cannot be parsed degrades to all-DROP rather than failing.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batches = [stats[i : i + batch_size] for i in range(0, len(stats), batch_size)]
    judge_name = getattr(judge, "endpoint", None)
    judge_name = judge_name.model if judge_name is not None else "unknown"

    def run_batch(batch: Sequence[DomainStats]) -> list[DomainVerdict]:
        exchange = judge.cached_complete(render_triage_prompt(batch))
        return parse_triage_response(exchange.response_text or "", batch, judge_name)

    verdicts: list[DomainVerdict] = []
    workers = max(1, min(getattr(judge.endpoint, "max_in_flight", 1) if hasattr(judge, "endpoint") else 1,
                         len(batches) or 1))
    try:
        if workers == 1:
            for batch in batches:
                verdicts.extend(run_batch(batch))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for batch_verdicts in pool.map(run_batch, batches):
                    verdicts.extend(batch_verdicts)
    except Exception as exc:
        raise TriageError(f"domain triage failed: {exc}", completed=verdicts) from exc
    return verdicts


def build_round2_trainset(
    kept: set[str],
    rejected: set[str],
    recalled_docs: Sequence[RawDocument],
    general_docs: Sequence[RawDocument],
    per_class_cap: int,
    seed: int = 0,
    labels: tuple[str, str] = ("negative", "positive"),
) -> list[LabeledExample]:
    """Training set for the round-2 classifier.

    Positives are sampled from recalled documents in kept domains; negatives
    half from recalled documents in rejected domains, half from the general
    corpus, topping up from the other source when one runs short.
    """
    overlap = kept & rejected
    if overlap:
        raise ValueError(f"kept and rejected domains overlap: {sorted(overlap)[:5]}")
    negative_label, positive_label = labels
    pos_pool = [d for d in recalled_docs if root_domain(d.url) in kept]
    if not pos_pool:
        raise RecallStageError("no recalled documents in kept domains; positive pool is empty")
    rej_pool = [d for d in recalled_docs if root_domain(d.url) in rejected]

    rng = random.Random(seed)
    positives = rng.sample(pos_pool, min(per_class_cap, len(pos_pool)))
    neg_cap = min(per_class_cap, len(rej_pool) + len(general_docs))
    want_rej = min((neg_cap + 1) // 2, len(rej_pool))
    want_gen = min(neg_cap - want_rej, len(general_docs))
    want_rej = min(neg_cap - want_gen, len(rej_pool))
    neg_rej = rng.sample(rej_pool, want_rej)
    neg_gen = rng.sample(list(general_docs), want_gen)

    examples = [LabeledExample(text=d.content, label=positive_label) for d in positives]
    examples += [LabeledExample(text=d.content, label=negative_label) for d in neg_rej + neg_gen]
    return examples


def sample_general_docs(shards: list[CorpusShard], k: int, seed: int = 0) -> list[RawDocument]:
    """Seeded reservoir sample of k documents across all shards."""
    rng = random.Random(seed)
    reservoir: list[RawDocument] = []
    seen = 0
    for shard in shards:
        for doc in read_shard(shard):
            seen += 1
            if len(reservoir) < k:
                reservoir.append(doc)
            else:
                j = rng.randrange(seen)
                if j < k:
                    reservoir[j] = doc
    return reservoir


@dataclass
class RecallConfig:
    threshold: float = 0.5  # CLI parameter; no value is derivable from the method description
    token_budget_round1: float = 100e9
    token_budget_round2: float = 40e9
    min_docs: int = DEFAULT_MIN_DOCS
    per_class_cap: int = 100_000
    triage_batch_size: int = 20
    seed: int = 0


@dataclass
class TwoRoundResult:
    pool: list[RawDocument]
    reports: tuple[RecallRoundReport, RecallRoundReport]
    round1_model: TextClassifier
    round2_model: TextClassifier
    round1_verdicts: list[DomainVerdict]
    round2_verdicts: list[DomainVerdict]


def run_two_round_recall(
    config: RecallConfig,
    classifier_config: ClassifierConfig,
    shards: list[CorpusShard],
    seed_examples: list[LabeledExample],
    judges: tuple,
    general_docs: Sequence[RawDocument] | None = None,
) -> TwoRoundResult:
    """The full two-round recall, in memory.

    The checkpointed, stage-by-stage equivalent lives in the pipeline module;
    this composition is the reference the pipeline must agree with.
    """
    judge1, judge2 = judges
    if general_docs is None:
        general_docs = sample_general_docs(shards, config.per_class_cap, seed=config.seed)

    model1 = train(seed_examples, classifier_config)
    report1 = RecallReport()
    pool1 = list(
        score_documents(
            model1, _corpus_stream(shards), config.threshold,
            token_budget=config.token_budget_round1, report=report1,
        )
    )
    grouping1 = group_by_domain(pool1, config.min_docs)
    verdicts1 = triage_domains(judge1, grouping1.retained, config.triage_batch_size)
    kept1 = {v.domain for v in verdicts1 if v.keep}
    rejected1 = {v.domain for v in verdicts1 if not v.keep}
    round1 = RecallRoundReport(
        round=1,
        docs_recalled=report1.docs_kept,
        tokens_recalled=report1.tokens_kept,
        domains_total=len(grouping1.retained),
        domains_kept=len(kept1),
    )

    trainset = build_round2_trainset(
        kept1, rejected1, pool1, general_docs, config.per_class_cap, seed=config.seed,
        labels=(classifier_config.labels[0], classifier_config.labels[-1]),
    )
    # Round-1 recalled documents are training material only from here on.
    model2 = train(trainset, classifier_config)
    report2 = RecallReport()
    pool2 = list(
        score_documents(
            model2, _corpus_stream(shards), config.threshold,
            token_budget=config.token_budget_round2, report=report2,
        )
    )
    grouping2 = group_by_domain(pool2, config.min_docs)
    verdicts2 = triage_domains(judge2, grouping2.retained, config.triage_batch_size)
    kept2 = {v.domain for v in verdicts2 if v.keep}
    final_pool = [d for d in pool2 if root_domain(d.url) in kept2]
    round2 = RecallRoundReport(
        round=2,
        docs_recalled=report2.docs_kept,
        tokens_recalled=report2.tokens_kept,
        domains_total=len(grouping2.retained),
        domains_kept=len(kept2),
    )
    return TwoRoundResult(
        pool=final_pool,
        reports=(round1, round2),
        round1_model=model1,
        round2_model=model2,
        round1_verdicts=verdicts1,
        round2_verdicts=verdicts2,
    )


def _corpus_stream(shards: list[CorpusShard]):
    for shard in shards:
        yield from read_shard(shard)
