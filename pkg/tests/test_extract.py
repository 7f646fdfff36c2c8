import hashlib
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qamine.corpus import make_document
from qamine.extract import (
    CleanDocument,
    ExtractionError,
    ExtractionPromptSpec,
    QACandidate,
    UncleanableError,
    candidate_id,
    clean_documents,
    clean_html,
    extract_pool,
    extract_qa,
    load_extraction_prompt,
    parse_extraction,
)
from qamine.llmclient import LlmEndpoint, MockLlm, MockRule

FIXTURES = Path(__file__).parent / "fixtures" / "html"
GOLDEN = Path(__file__).parent / "golden" / "cleaned"


class TestCleanHtml:
    def test_script_stripped(self):
        doc = make_document("https://a.com/x", "<p>Q: 1+1?</p><script>x()</script>")
        cleaned = clean_html(doc)
        assert cleaned.text == "Q: 1+1?"
        assert cleaned.removed_fraction > 0

    def test_class_pattern_rule(self):
        doc = make_document("https://a.com/x", '<div class="ad-banner">BUY</div><p>body</p>')
        assert clean_html(doc).text == "body"

    def test_id_pattern_rule(self):
        doc = make_document("https://a.com/x", '<div id="sidebar">links</div><p>keep</p>')
        assert clean_html(doc).text == "keep"

    def test_pattern_needs_token_boundary(self):
        # "gradient" contains "ad" but is not boilerplate.
        doc = make_document("https://a.com/x", '<div class="gradient">keep this</div>')
        assert "keep this" in clean_html(doc).text

    @pytest.mark.parametrize("page", sorted(FIXTURES.glob("*.html")), ids=lambda p: p.stem)
    def test_golden_corpus(self, page):
        doc = make_document(f"https://example.com/{page.stem}", page.read_text())
        expected = (GOLDEN / f"{page.stem}.txt").read_text()
        assert clean_html(doc).text == expected

    def test_binary_content_rejected(self):
        doc = make_document("https://a.com/x", "\x00\x01\x02" * 500)
        with pytest.raises(UncleanableError):
            clean_html(doc)

    def test_removed_fraction_in_range(self):
        for html in ["<p>a</p>", "<p>" + "word " * 500 + "</p>", "<script>x</script>"]:
            frac = clean_html(make_document("https://a.com/x", html)).removed_fraction
            assert 0.0 <= frac <= 1.0

    def test_idempotent_modulo_whitespace(self):
        for page in sorted(FIXTURES.glob("*.html"))[:10]:
            once = clean_html(make_document("https://e.com/1", page.read_text())).text
            if not once:
                continue
            again = clean_html(make_document("https://e.com/2", once)).text
            assert " ".join(again.split()) == " ".join(once.split())

    def test_clean_documents_counts_skips(self):
        docs = [
            make_document("https://a.com/1", "<p>fine</p>"),
            make_document("https://a.com/2", "\x00\x01" * 600),
            make_document("https://a.com/3", "<nav>only chrome</nav>"),
        ]
        counters = {}
        cleaned = list(clean_documents(docs, counters))
        assert [c.text for c in cleaned] == ["fine"]
        assert counters["uncleanable"] == 1
        assert counters["empty_after_cleaning"] == 1


_tag = st.sampled_from(["p", "div", "script", "style", "b", "nav", "span", "pre", "li", "h1"])
_text_chunk = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"),
    max_size=40,
)


@st.composite
def html_soup(draw):
    parts = []
    for _ in range(draw(st.integers(0, 12))):
        kind = draw(st.integers(0, 5))
        if kind == 0:
            parts.append(draw(_text_chunk))
        elif kind == 1:
            tag = draw(_tag)
            parts.append(f"<{tag} class={draw(st.sampled_from(['x', 'ad', 'main', 'promo-a']))}>")
        elif kind == 2:
            parts.append(f"</{draw(_tag)}>")
        elif kind == 3:
            parts.append(draw(st.sampled_from(["&lt;script&gt;", "&lt;style&gt;", "&amp;", "&#60;script", "<!-- c -->"])))
        elif kind == 4:
            parts.append("<script>var x = '</div>';</script>")
        else:
            parts.append("<style>.a { content: '<script>'; }</style>")
    return "".join(parts)


class TestCleanFuzz:
    @given(html_soup())
    @settings(max_examples=300, deadline=None)
    def test_no_script_or_style_survives(self, html):
        if not html:
            return
        try:
            cleaned = clean_html(make_document("https://f.com/x", html))
        except UncleanableError:
            return
        lowered = cleaned.text.lower()
        assert "<script" not in lowered
        assert "<style" not in lowered

    @given(html_soup())
    @settings(max_examples=200, deadline=None)
    def test_no_tag_like_angle_brackets(self, html):
        if not html:
            return
        try:
            cleaned = clean_html(make_document("https://f.com/x", html))
        except UncleanableError:
            return
        import re

        assert re.search(r"<[A-Za-z]", cleaned.text) is None


class TestParseExtraction:
    def test_void(self):
        assert parse_extraction("NO_QA_FOUND") == ([], 0)

    def test_void_with_whitespace(self):
        assert parse_extraction("  NO_QA_FOUND\n") == ([], 0)

    def test_single_block(self):
        pairs, rejected = parse_extraction("QUESTION:\nWhat is 2+2?\nANSWER:\n4")
        assert pairs == [("What is 2+2?", "4")]
        assert rejected == 0

    def test_three_blocks_middle_invalid(self):
        response = (
            "QUESTION:\nq1\nANSWER:\na1\n---\n"
            "QUESTION:\nq2 without answer marker\n---\n"
            "QUESTION:\nq3\nANSWER:\na3"
        )
        pairs, rejected = parse_extraction(response)
        assert pairs == [("q1", "a1"), ("q3", "a3")]
        assert rejected == 1

    def test_multiline_fields(self):
        response = "QUESTION:\nline one\nline two\nANSWER:\nanswer line 1\nanswer line 2"
        pairs, _ = parse_extraction(response)
        assert pairs == [("line one\nline two", "answer line 1\nanswer line 2")]

    def test_empty_fields_rejected(self):
        pairs, rejected = parse_extraction("QUESTION:\n\nANSWER:\nhas answer")
        assert pairs == []
        assert rejected == 1

    def test_trailing_delimiter_not_a_reject(self):
        pairs, rejected = parse_extraction("QUESTION:\nq\nANSWER:\na\n---\n")
        assert pairs == [("q", "a")]
        assert rejected == 0

    def test_garbage(self):
        pairs, rejected = parse_extraction("complete nonsense")
        assert pairs == []
        assert rejected == 1


class TestPromptSpec:
    def test_packaged_default_loads(self):
        spec = load_extraction_prompt()
        assert spec.void_sentinel == "NO_QA_FOUND"
        assert any(out.strip() == spec.void_sentinel for _, out in spec.few_shots)

    def test_requires_void_shot(self):
        with pytest.raises(ValueError):
            ExtractionPromptSpec(preamble="p", few_shots=[("doc", "QUESTION:\nq\nANSWER:\na")])

    def test_requires_some_shot(self):
        with pytest.raises(ValueError):
            ExtractionPromptSpec(preamble="p", few_shots=[])


def _mock(rules, **endpoint_kwargs):
    endpoint = LlmEndpoint(base_url="mock://", model="mock-extractor", **endpoint_kwargs)
    return MockLlm(rules, endpoint=endpoint)


def _clean_doc(i, text):
    return CleanDocument(doc_id=f"doc{i:04d}", url=f"https://q.com/{i}", text=text, removed_fraction=0.0)


class TestExtractQa:
    def test_void_returns_empty(self):
        llm = _mock([MockRule(response="NO_QA_FOUND", substring="")])
        spec = load_extraction_prompt()
        assert extract_qa(llm, _clean_doc(1, "nothing here"), spec) == []

    def test_single_block_one_candidate(self):
        llm = _mock([MockRule(response="QUESTION:\nWhat?\nANSWER:\nThat.", substring="")])
        spec = load_extraction_prompt()
        cands = extract_qa(llm, _clean_doc(2, "some text"), spec)
        assert len(cands) == 1
        cand = cands[0]
        assert (cand.question, cand.answer) == ("What?", "That.")
        assert cand.candidate_id == candidate_id("doc0002", 0)
        assert cand.extractor == "mock-extractor"

    def test_ordinals_and_ids(self):
        response = "QUESTION:\nq1\nANSWER:\na1\n---\nQUESTION:\nq2\nANSWER:\na2"
        llm = _mock([MockRule(response=response, substring="")])
        cands = extract_qa(llm, _clean_doc(3, "text"), load_extraction_prompt())
        assert [c.ordinal for c in cands] == [0, 1]
        assert len({c.candidate_id for c in cands}) == 2

    def test_malformed_response_counted(self):
        llm = _mock([MockRule(response="not parseable at all", substring="")])
        counters = {}
        assert extract_qa(llm, _clean_doc(4, "text"), load_extraction_prompt(), counters) == []
        assert counters["malformed_responses"] == 1

    def test_truncation_counter(self):
        llm = _mock([MockRule(response="NO_QA_FOUND", substring="")], context_tokens=5)
        counters = {}
        extract_qa(llm, _clean_doc(5, "one two three four five six seven"), load_extraction_prompt(), counters)
        assert counters["truncated_docs"] == 1
        sent = llm.prompts[-1]
        assert "six" not in sent.split("Document:")[1]


class TestExtractPool:
    def test_one_call_per_doc_and_yield_fraction(self):
        docs = [_clean_doc(i, f"document body DOCKEY-{i:04d}") for i in range(100)]
        # Void for 70% of documents, keyed off the document marker.
        rules = [
            MockRule(response="NO_QA_FOUND", substring=f"DOCKEY-{i:04d}")
            for i in range(100)
            if i % 10 < 7
        ]
        rules.append(MockRule(response="QUESTION:\nq {prompt_sha8}\nANSWER:\na", substring="", interpolate=True))
        llm = _mock(rules, max_in_flight=8)
        cands = extract_pool(llm, docs, load_extraction_prompt())
        assert llm.calls == 100
        assert len({c.doc_id for c in cands}) == 30

    def test_output_sorted_and_referential(self):
        docs = [_clean_doc(i, f"body DOCKEY-{i:04d}") for i in range(20)]
        llm = _mock(
            [MockRule(response="QUESTION:\nq {prompt_sha8}\nANSWER:\na", substring="", interpolate=True)],
            max_in_flight=4,
        )
        cands = extract_pool(llm, docs, load_extraction_prompt())
        assert [c.doc_id for c in cands] == sorted(c.doc_id for c in cands)
        doc_ids = {d.doc_id for d in docs}
        assert all(c.doc_id in doc_ids for c in cands)

    def test_endpoint_failure_carries_completed(self):
        docs = [_clean_doc(i, f"body DOCKEY-{i:04d}") for i in range(10)]
        rules = [
            MockRule(response="QUESTION:\nq\nANSWER:\na", substring=f"DOCKEY-{i:04d}")
            for i in range(5)
        ]  # no rule matches docs 5..9 -> LlmError
        llm = _mock(rules, max_in_flight=1)
        with pytest.raises(ExtractionError) as err:
            extract_pool(llm, docs, load_extraction_prompt())
        assert len(err.value.completed) == 5
