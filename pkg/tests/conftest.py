"""Shared fixture builders for the test suite."""

from __future__ import annotations

import gzip
import json
import random
from pathlib import Path

import pytest

from qamine.classifier import LabeledExample


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


def warc_record(url: str, html: str, date: str = "2023-01-01T00:00:00Z") -> bytes:
    payload = b"HTTP/1.1 200 OK\r\nContent-Type: text/html\r\n\r\n" + html.encode("utf-8")
    headers = (
        "WARC/1.0\r\n"
        "WARC-Type: response\r\n"
        f"WARC-Target-URI: {url}\r\n"
        f"WARC-Date: {date}\r\n"
        f"Content-Length: {len(payload)}\r\n"
        "\r\n"
    ).encode("utf-8")
    return headers + payload + b"\r\n\r\n"


def write_warc(path: Path, records: list[tuple[str, str]], per_record_gzip: bool = False) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for url, html in records:
            raw = warc_record(url, html)
            fh.write(gzip.compress(raw) if per_record_gzip else raw)
    return path


WORDS_POSITIVE = [f"quizword{i}" for i in range(50)]
WORDS_NEGATIVE = [f"plainword{i}" for i in range(50)]


def separable_examples(n_per_class: int, seed: int = 0, tokens: int = 30) -> list[LabeledExample]:
    """Two classes with disjoint 50-word vocabularies; trivially separable."""
    rnd = random.Random(seed)
    out = []
    for _ in range(n_per_class):
        out.append(LabeledExample(" ".join(rnd.choices(WORDS_POSITIVE, k=tokens)), "positive"))
        out.append(LabeledExample(" ".join(rnd.choices(WORDS_NEGATIVE, k=tokens)), "negative"))
    return out


@pytest.fixture
def tmp_jsonl_shard(tmp_path):
    def build(rows, name="shard.jsonl"):
        return write_jsonl(tmp_path / name, rows)

    return build
