"""Rule-based HTML cleaning and few-shot LLM extraction of Q-A pairs."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from html.parser import HTMLParser
from importlib import resources
from pathlib import Path
from typing import Iterable

from .corpus import RawDocument, count_tokens
from .errors import PipelineError

logger = logging.getLogger(__name__)

VOID_SENTINEL = "NO_QA_FOUND"

# Subtrees deleted outright, plus comments.
STRIP_TAGS = frozenset({"script", "style", "nav", "header", "footer", "aside", "form", "iframe"})

# class/id patterns marking boilerplate elements. Versioned with the repo;
# matching is boundary-aware (start/end or -, _, whitespace on both sides).
BOILERPLATE_PATTERNS = (
    "ad", "banner", "promo", "sidebar", "cookie", "share",
    "comment-form", "breadcrumb", "menu",
)
_BOILERPLATE_RES = [
    re.compile(rf"(?:^|[\s_-]){re.escape(p)}(?:[\s_-]|$)") for p in BOILERPLATE_PATTERNS
]

VERBATIM_TAGS = frozenset({"pre", "code", "math"})

BLOCK_TAGS = frozenset({
    "address", "article", "blockquote", "br", "caption", "dd", "details", "div",
    "dl", "dt", "fieldset", "figcaption", "figure", "h1", "h2", "h3", "h4",
    "h5", "h6", "hr", "li", "main", "ol", "p", "pre", "section", "summary",
    "table", "tbody", "td", "tfoot", "th", "thead", "tr", "ul",
})

VOID_TAGS = frozenset({
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link",
    "meta", "param", "source", "track", "wbr",
})


class UncleanableError(PipelineError):
    """Input is not parseable as text (e.g. binary payload)."""


class ExtractionError(PipelineError):
    """LLM extraction failed mid-pool; carries completed candidates for resume."""

    def __init__(self, message: str, completed: list["QACandidate"] | None = None):
        super().__init__(message)
        self.completed = completed or []


@dataclass(frozen=True)
class CleanDocument:
    doc_id: str
    url: str
    text: str
    removed_fraction: float

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "url": self.url,
            "text": self.text,
            "removed_fraction": self.removed_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleanDocument":
        return cls(d["doc_id"], d["url"], d["text"], d["removed_fraction"])


@dataclass(frozen=True)
class QACandidate:
    candidate_id: str
    doc_id: str
    url: str
    ordinal: int
    question: str
    answer: str
    extractor: str

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "doc_id": self.doc_id,
            "url": self.url,
            "ordinal": self.ordinal,
            "question": self.question,
            "answer": self.answer,
            "extractor": self.extractor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QACandidate":
        return cls(
            d["candidate_id"], d["doc_id"], d["url"], d["ordinal"],
            d["question"], d["answer"], d["extractor"],
        )


def candidate_id(doc_id: str, ordinal: int) -> str:
    return hashlib.sha256(f"{doc_id}:{ordinal}".encode("utf-8")).hexdigest()[:32]


def _is_boilerplate(attrs: list[tuple[str, str | None]]) -> bool:
    for name, value in attrs:
        if name in ("class", "id") and value:
            value = value.lower()
            if any(rx.search(value) for rx in _BOILERPLATE_RES):
                return True
    return False


class _TextExtractor(HTMLParser):
    """Streaming tag-soup-to-text converter behind clean_html.

    Suppressed subtrees track nesting only of the suppressing tag name, which
    handles same-tag nesting (ad divs inside divs) without needing the full
    malformed-markup tree.
    """

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._suppress_tag: str | None = None
        self._suppress_depth = 0
        self._verbatim_tag: str | None = None
        self._verbatim_depth = 0

    def handle_starttag(self, tag, attrs):
        if self._suppress_tag is not None:
            if tag == self._suppress_tag and tag not in VOID_TAGS:
                self._suppress_depth += 1
            return
        if tag in STRIP_TAGS or _is_boilerplate(attrs):
            if tag not in VOID_TAGS:
                self._suppress_tag = tag
                self._suppress_depth = 1
            return
        if tag in BLOCK_TAGS:
            self.parts.append("\n")
        if tag in VERBATIM_TAGS and self._verbatim_tag is None:
            self._verbatim_tag = tag
            self._verbatim_depth = 1
        elif tag == self._verbatim_tag and tag not in VOID_TAGS:
            self._verbatim_depth += 1

    def handle_startendtag(self, tag, attrs):
        if self._suppress_tag is None and tag in BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if self._suppress_tag is not None:
            if tag == self._suppress_tag:
                self._suppress_depth -= 1
                if self._suppress_depth <= 0:
                    self._suppress_tag = None
            return
        if tag == self._verbatim_tag:
            self._verbatim_depth -= 1
            if self._verbatim_depth <= 0:
                self._verbatim_tag = None
        if tag in BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if self._suppress_tag is not None:
            return
        data = data.replace("\x00", "")
        if self._verbatim_tag is not None:
            # \x00 fences verbatim spans so normalization skips them.
            self.parts.append("\x00" + data + "\x00")
        else:
            self.parts.append(re.sub(r"\s+", " ", data))

    def text(self) -> str:
        segments = "".join(self.parts).split("\x00")
        for i in range(0, len(segments), 2):  # even segments are non-verbatim
            seg = re.sub(r"[ \t]+", " ", segments[i])
            seg = re.sub(r" *\n *", "\n", seg)
            seg = re.sub(r"\n{4,}", "\n\n", seg)  # >=3 blank lines -> one
            segments[i] = seg
        out = "".join(segments).strip()
        # Invariant: "<" followed by an ASCII letter never occurs (covers
        # entity-decoded markup like &lt;script&gt;).
        return re.sub(r"<(?=[A-Za-z])", "&lt;", out)


_CONTROL_RE = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f]")


def clean_html(doc: RawDocument) -> CleanDocument:
    """Strip boilerplate and markup from one document's HTML.

    Raises UncleanableError for content that is not text (binary payloads).
    """
    html = doc.html
    if not html:
        raise ValueError("document has empty html")
    probe = html[:4096]
    if _CONTROL_RE.search(probe) and len(_CONTROL_RE.findall(probe)) > 0.05 * len(probe):
        raise UncleanableError(f"binary content in {doc.id}")
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    text = parser.text()
    removed = min(1.0, max(0.0, 1.0 - len(text) / len(html)))
    return CleanDocument(doc_id=doc.id, url=doc.url, text=text, removed_fraction=removed)


def clean_documents(docs: Iterable[RawDocument], counters: dict | None = None):
    """Clean a stream, skipping uncleanable and empty-after-cleaning documents
    with counters; those yield no Q-A content downstream."""
    if counters is None:
        counters = {}
    for doc in docs:
        try:
            cleaned = clean_html(doc)
        except (UncleanableError, ValueError):
            _bump(counters, "uncleanable")
            continue
        if not cleaned.text:
            _bump(counters, "empty_after_cleaning")
            continue
        yield cleaned


@dataclass
class ExtractionPromptSpec:
    preamble: str
    few_shots: list[tuple[str, str]]
    void_sentinel: str = VOID_SENTINEL

    def __post_init__(self):
        if not self.few_shots:
            raise ValueError("at least one few-shot example required")
        if not any(out.strip() == self.void_sentinel for _, out in self.few_shots):
            raise ValueError("one few-shot must demonstrate the void sentinel")

    def render(self, document_text: str) -> list[dict]:
        parts = [self.preamble, ""]
        for shot_doc, shot_out in self.few_shots:
            parts += ["Example document:", "<<<", shot_doc, ">>>", "Expected output:", shot_out, ""]
        parts += ["Document:", "<<<", document_text, ">>>", "Output:"]
        return [{"role": "user", "content": "\n".join(parts)}]


def load_extraction_prompt(path: Path | str | None = None) -> ExtractionPromptSpec:
    """Load the prompt spec from a template file (packaged default if None)."""
    if path is None:
        raw = resources.files("qamine").joinpath("prompts/extraction.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    data = json.loads(raw)
    return ExtractionPromptSpec(
        preamble=data["preamble"],
        few_shots=[(s["document"], s["output"]) for s in data["few_shots"]],
        void_sentinel=data.get("void_sentinel", VOID_SENTINEL),
    )


def parse_extraction(response: str, void_sentinel: str = VOID_SENTINEL) -> tuple[list[tuple[str, str]], int]:
    """Parse QUESTION/ANSWER blocks separated by --- lines.

    Returns (pairs, rejected_block_count). A response equal to the sentinel
    parses as zero blocks; a block missing either marker (or with an empty
    field) invalidates only that block.
    """
    if response.strip() == void_sentinel:
        return [], 0
    blocks: list[list[str]] = []
    current: list[str] = []
    for line in response.splitlines():
        if line.strip() == "---":
            blocks.append(current)
            current = []
        else:
            current.append(line)
    blocks.append(current)

    pairs: list[tuple[str, str]] = []
    rejected = 0
    for lines in blocks:
        if not any(line.strip() for line in lines):
            continue
        q_idx = a_idx = None
        for i, line in enumerate(lines):
            stripped = line.strip()
            if stripped == "QUESTION:" and q_idx is None:
                q_idx = i
            elif stripped == "ANSWER:" and q_idx is not None and a_idx is None:
                a_idx = i
        if q_idx is None or a_idx is None:
            rejected += 1
            continue
        question = "\n".join(lines[q_idx + 1 : a_idx]).strip()
        answer = "\n".join(lines[a_idx + 1 :]).strip()
        if not question or not answer:
            rejected += 1
            continue
        pairs.append((question, answer))
    return pairs, rejected


_COUNTER_LOCK = threading.Lock()


def _bump(counters: dict, key: str, amount: int = 1) -> None:
    with _COUNTER_LOCK:
        counters[key] = counters.get(key, 0) + amount


def extract_qa(llm, doc: CleanDocument, prompt: ExtractionPromptSpec,
               counters: dict | None = None) -> list[QACandidate]:
    """One LLM call for one document; honors the void sentinel."""
    if counters is None:
        counters = {}
    if not doc.text:
        raise ValueError("document text is empty")
    text = doc.text
    budget = getattr(llm.endpoint, "context_tokens", None)
    if budget is not None and count_tokens(text) > budget:
        text = " ".join(text.split()[:budget])  # head truncation
        _bump(counters, "truncated_docs")
    exchange = llm.cached_complete(prompt.render(text))
    response = exchange.response_text or ""
    pairs, rejected = parse_extraction(response, prompt.void_sentinel)
    if rejected:
        _bump(counters, "rejected_blocks", rejected)
    if not pairs and response.strip() != prompt.void_sentinel:
        _bump(counters, "malformed_responses")
    model_name = llm.endpoint.model
    return [
        QACandidate(
            candidate_id=candidate_id(doc.doc_id, i),
            doc_id=doc.doc_id,
            url=doc.url,
            ordinal=i,
            question=q,
            answer=a,
            extractor=model_name,
        )
        for i, (q, a) in enumerate(pairs)
    ]


def extract_pool(llm, docs: list[CleanDocument], prompt: ExtractionPromptSpec,
                 counters: dict | None = None) -> list[QACandidate]:
    """Extract over a pool: exactly one LLM call per document, concurrent up
    to the client's in-flight bound, output sorted by (doc_id, ordinal)."""
    if counters is None:
        counters = {}
    workers = max(1, min(getattr(llm.endpoint, "max_in_flight", 1), len(docs) or 1))
    results: list[QACandidate] = []
    try:
        if workers == 1:
            for doc in docs:
                results.extend(extract_qa(llm, doc, prompt, counters))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for cands in pool.map(lambda d: extract_qa(llm, d, prompt, counters), docs):
                    results.extend(cands)
    except Exception as exc:
        raise ExtractionError(f"extraction failed: {exc}", completed=results) from exc
    results.sort(key=lambda c: (c.doc_id, c.ordinal))
    return results
