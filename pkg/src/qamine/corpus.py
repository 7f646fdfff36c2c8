"""Sharded web-corpus ingestion and the document model shared by every stage."""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterator
from urllib.parse import urlsplit

from .ioutil import iter_jsonl

logger = logging.getLogger(__name__)

EPOCH_ISO = "1970-01-01T00:00:00+00:00"
SHARD_FORMATS = ("warc", "jsonl")


class ShardError(Exception):
    """A shard file cannot be read at all (missing, unreadable, bad format)."""


class MalformedUrlError(ValueError):
    pass


def count_tokens(text: str) -> int:
    """Number of maximal non-whitespace runs."""
    return len(text.split())


def root_domain(url: str) -> str:
    """Lowercase host with leading "www." labels stripped.

    Stripping repeats until no leading "www." remains, so the function is a
    fixed point on its own output. IP-address hosts pass through verbatim.
    Raises MalformedUrlError for relative or hostless URLs.
    """
    try:
        parts = urlsplit(url)
        host = parts.hostname
    except ValueError as exc:
        raise MalformedUrlError(f"unparseable URL: {url!r}") from exc
    if not parts.scheme or not host:
        raise MalformedUrlError(f"not an absolute URL with a host: {url!r}")
    while host.startswith("www.") and len(host) > 4:
        host = host[4:]
    return host


@dataclass(frozen=True)
class RawDocument:
    """One fetched web page.

    `id` is a pure function of (url, fetch_time); `token_count` counts
    whitespace tokens of `text` when present, else of the raw html.
    """

    id: str
    url: str
    fetch_time: str  # ISO-8601 UTC
    html: str
    text: str | None = None
    token_count: int = 0

    @property
    def content(self) -> str:
        return self.text if self.text is not None else self.html

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "url": self.url,
            "fetch_time": self.fetch_time,
            "html": self.html,
            "token_count": self.token_count,
        }
        if self.text is not None:
            d["text"] = self.text
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RawDocument":
        return cls(
            id=d["id"],
            url=d["url"],
            fetch_time=d["fetch_time"],
            html=d["html"],
            text=d.get("text"),
            token_count=d["token_count"],
        )


def document_id(url: str, fetch_time: str) -> str:
    return hashlib.sha256(f"{url}\n{fetch_time}".encode("utf-8")).hexdigest()[:32]


def make_document(url: str, html: str, fetch_time: str = EPOCH_ISO, text: str | None = None) -> RawDocument:
    counted = text if text is not None else html
    return RawDocument(
        id=document_id(url, fetch_time),
        url=url,
        fetch_time=fetch_time,
        html=html,
        text=text,
        token_count=count_tokens(counted),
    )


def with_text(doc: RawDocument, text: str) -> RawDocument:
    return replace(doc, text=text, token_count=count_tokens(text))


@dataclass
class CorpusShard:
    path: Path
    format: str  # one of SHARD_FORMATS
    record_count: int | None = None


@dataclass
class ReadStats:
    """Mutable counters filled while a shard stream is consumed."""

    yielded: int = 0
    skipped: int = 0


def read_manifest(path: Path | str) -> list[CorpusShard]:
    """Shard manifest: JSONL of {path, format}; relative paths resolve against the manifest."""
    path = Path(path)
    shards = []
    for row in iter_jsonl(path):
        fmt = row["format"]
        if fmt not in SHARD_FORMATS:
            raise ShardError(f"{path}: unknown shard format {fmt!r}")
        shard_path = Path(row["path"])
        if not shard_path.is_absolute():
            shard_path = path.parent / shard_path
        shards.append(CorpusShard(path=shard_path, format=fmt))
    return shards


def read_shard(shard: CorpusShard, stats: ReadStats | None = None) -> Iterator[RawDocument]:
    """Stream documents from one shard in file order.

    Malformed records are skipped and counted in `stats`, never abort the
    stream. An unreadable file raises ShardError.
    """
    if stats is None:
        stats = ReadStats()
    if shard.format == "jsonl":
        gen = _read_jsonl_shard(shard.path, stats)
    elif shard.format == "warc":
        gen = _read_warc_shard(shard.path, stats)
    else:
        raise ShardError(f"unknown shard format {shard.format!r}")
    return gen


def _normalize_fetch_time(value) -> str:
    if value is None:
        return EPOCH_ISO
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value, tz=timezone.utc).isoformat()
    if isinstance(value, str) and value:
        return value
    raise ValueError(f"bad fetch_time: {value!r}")


def _read_jsonl_shard(path: Path, stats: ReadStats) -> Iterator[RawDocument]:
    try:
        fh = open(path, "r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise ShardError(f"cannot open shard {path}: {exc}") from exc
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                url = row["url"]
                html = row["html"]
                if not isinstance(url, str) or not isinstance(html, str):
                    raise ValueError("url and html must be strings")
                root_domain(url)  # validates absolute URL with host
                fetch_time = _normalize_fetch_time(row.get("fetch_time"))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError):
                stats.skipped += 1
                continue
            stats.yielded += 1
            yield make_document(url, html, fetch_time)


# --- minimal WARC reading (ISO 28500 response records; plain or gzip) ---
#
# warcio is not available on the package mirror, so this implements the
# subset the pipeline needs: record framing, response records, and the raw
# HTTP payload split. Chunked transfer encoding and gzip content encoding
# are undone when present; anything that fails to parse is skipped.


def _read_warc_shard(path: Path, stats: ReadStats) -> Iterator[RawDocument]:
    try:
        raw = open(path, "rb")
    except OSError as exc:
        raise ShardError(f"cannot open shard {path}: {exc}") from exc
    with raw:
        head = raw.read(2)
        raw.seek(0)
        stream: BinaryIO
        if head == b"\x1f\x8b":
            stream = gzip.open(raw, "rb")  # handles per-record gzip members
        else:
            stream = raw
        yield from _iter_warc_records(stream, stats)


def _iter_warc_records(stream: BinaryIO, stats: ReadStats) -> Iterator[RawDocument]:
    while True:
        line = stream.readline()
        if not line:
            return
        if not line.strip():
            continue
        if not line.startswith(b"WARC/"):
            # Out of sync; skip to the next plausible record boundary.
            stats.skipped += 1
            continue
        try:
            headers = _read_warc_headers(stream)
            length = int(headers.get("content-length", "0"))
            block = stream.read(length)
            if len(block) < length:
                stats.skipped += 1
                return
        except (ValueError, OSError):
            stats.skipped += 1
            return
        if headers.get("warc-type") != "response":
            continue
        doc = _document_from_response(headers, block)
        if doc is None:
            stats.skipped += 1
        else:
            stats.yielded += 1
            yield doc


def _read_warc_headers(stream: BinaryIO) -> dict[str, str]:
    headers: dict[str, str] = {}
    while True:
        line = stream.readline()
        if not line:
            raise ValueError("truncated WARC header")
        line = line.rstrip(b"\r\n")
        if not line:
            return headers
        if b":" in line:
            name, _, value = line.partition(b":")
            headers[name.decode("ascii", "replace").strip().lower()] = value.decode(
                "utf-8", "replace"
            ).strip()


def _document_from_response(headers: dict[str, str], block: bytes) -> RawDocument | None:
    url = headers.get("warc-target-uri")
    if not url:
        return None
    try:
        root_domain(url)
    except MalformedUrlError:
        return None
    fetch_time = headers.get("warc-date") or EPOCH_ISO
    try:
        body = _http_response_body(block)
    except ValueError:
        return None
    html = body.decode("utf-8", errors="replace")
    return make_document(url, html, fetch_time)


def _http_response_body(block: bytes) -> bytes:
    sep = block.find(b"\r\n\r\n")
    if sep < 0:
        sep = block.find(b"\n\n")
        if sep < 0:
            raise ValueError("no HTTP header/body separator")
        head, body = block[:sep], block[sep + 2 :]
    else:
        head, body = block[:sep], block[sep + 4 :]
    head_lower = head.lower()
    if b"transfer-encoding:" in head_lower and b"chunked" in head_lower:
        body = _dechunk(body)
    if b"content-encoding: gzip" in head_lower:
        body = gzip.decompress(body)
    return body


def _dechunk(body: bytes) -> bytes:
    out = bytearray()
    pos = 0
    while True:
        eol = body.find(b"\r\n", pos)
        if eol < 0:
            raise ValueError("truncated chunked body")
        size_token = body[pos:eol].split(b";")[0].strip()
        size = int(size_token, 16)
        if size == 0:
            return bytes(out)
        start = eol + 2
        out += body[start : start + size]
        pos = start + size + 2  # skip trailing CRLF
