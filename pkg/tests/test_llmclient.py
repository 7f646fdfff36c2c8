import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from conftest import write_jsonl
from qamine.llmclient import (
    ChatExchange,
    LlmClient,
    LlmEndpoint,
    MockLlm,
    MockRule,
    PermanentClientError,
    RateLimiter,
    TransientExhaustedError,
    build_client,
    cache_key,
)

USER = [{"role": "user", "content": "hello"}]


class StubState:
    def __init__(self):
        self.lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.requests = 0
        self.timestamps: list[float] = []
        self.fail_plan: list[int] = []  # status codes to emit before succeeding
        self.delay = 0.0


class StubHandler(BaseHTTPRequestHandler):
    state: StubState = None

    def do_POST(self):
        st = self.state
        with st.lock:
            st.requests += 1
            st.in_flight += 1
            st.peak_in_flight = max(st.peak_in_flight, st.in_flight)
            st.timestamps.append(time.monotonic())
            status = st.fail_plan.pop(0) if st.fail_plan else 200
        try:
            if st.delay:
                time.sleep(st.delay)
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length)) if length else {}
            if status != 200:
                self.send_response(status)
                self.end_headers()
                return
            reply = {
                "choices": [{"message": {"content": f"echo:{len(body.get('messages', []))}"}}],
                "usage": {"prompt_tokens": 3, "completion_tokens": 2},
            }
            data = json.dumps(reply).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        finally:
            with st.lock:
                st.in_flight -= 1

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    state = StubState()
    handler = type("Handler", (StubHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", state
    server.shutdown()


def _endpoint(base_url, **kwargs):
    return LlmEndpoint(base_url=base_url, model="stub-model", **kwargs)


class TestComplete:
    def test_success_roundtrip(self, stub_server):
        url, state = stub_server
        client = LlmClient(_endpoint(url))
        exchange = client.complete(USER)
        assert exchange.response_text == "echo:1"
        assert exchange.attempts == 1
        assert exchange.prompt_tokens == 3

    def test_retries_on_429_then_succeeds(self, stub_server):
        url, state = stub_server
        state.fail_plan = [429, 429]
        sleeps = []
        client = LlmClient(_endpoint(url), sleep=sleeps.append)
        exchange = client.complete(USER)
        assert exchange.attempts == 3
        assert len(sleeps) == 2
        # Full jitter: each delay within its growing bound.
        assert 0 <= sleeps[0] <= 1.0
        assert 0 <= sleeps[1] <= 2.0

    def test_5xx_retried(self, stub_server):
        url, state = stub_server
        state.fail_plan = [500]
        client = LlmClient(_endpoint(url), sleep=lambda s: None)
        assert client.complete(USER).attempts == 2

    def test_permanent_4xx_no_retry(self, stub_server):
        url, state = stub_server
        state.fail_plan = [404]
        client = LlmClient(_endpoint(url), sleep=lambda s: None)
        with pytest.raises(PermanentClientError):
            client.complete(USER)
        assert state.requests == 1

    def test_retries_exhausted(self, stub_server):
        url, state = stub_server
        state.fail_plan = [429] * 10
        client = LlmClient(_endpoint(url, max_retries=2), sleep=lambda s: None)
        with pytest.raises(TransientExhaustedError) as err:
            client.complete(USER)
        assert err.value.attempts == 3
        assert state.requests == 3

    def test_requires_user_message(self, stub_server):
        url, _ = stub_server
        client = LlmClient(_endpoint(url))
        with pytest.raises(ValueError):
            client.complete([{"role": "system", "content": "x"}])

    def test_in_flight_bounded(self, stub_server):
        url, state = stub_server
        state.delay = 0.02
        client = LlmClient(_endpoint(url, max_in_flight=4))
        threads = [threading.Thread(target=client.complete, args=(USER,)) for _ in range(32)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert state.requests == 32
        assert state.peak_in_flight <= 4


class TestRateLimiter:
    def test_caps_any_sixty_second_window(self):
        now = [0.0]
        slept = []

        def clock():
            return now[0]

        def sleep(s):
            slept.append(s)
            now[0] += s

        limiter = RateLimiter(30, clock=clock, sleep=sleep)
        stamps = []
        for _ in range(90):
            limiter.acquire()
            stamps.append(now[0])
        for i, t in enumerate(stamps):
            in_window = sum(1 for u in stamps if t - 60 < u <= t)
            assert in_window <= 30
        assert slept  # limiter actually throttled

    def test_backoff_bounds_non_decreasing(self):
        import qamine.llmclient as mod

        bounds = [mod.BACKOFF_BASE * mod.BACKOFF_FACTOR ** k for k in range(5)]
        assert bounds == sorted(bounds)


class TestCache:
    def test_second_call_served_from_cache(self, stub_server, tmp_path):
        url, state = stub_server
        client = LlmClient(_endpoint(url), cache_dir=tmp_path)
        first = client.cached_complete(USER)
        assert first.attempts == 1
        second = client.cached_complete(USER)
        assert second.attempts == 0
        assert second.response_text == first.response_text
        assert state.requests == 1

    def test_different_temperature_different_key(self, stub_server, tmp_path):
        url, state = stub_server
        a = LlmClient(_endpoint(url, temperature=0.0), cache_dir=tmp_path)
        b = LlmClient(_endpoint(url, temperature=0.7), cache_dir=tmp_path)
        a.cached_complete(USER)
        b.cached_complete(USER)
        assert state.requests == 2
        assert cache_key("m", 0.0, USER) != cache_key("m", 0.7, USER)

    def test_corrupt_entry_treated_as_miss(self, stub_server, tmp_path):
        url, state = stub_server
        client = LlmClient(_endpoint(url), cache_dir=tmp_path)
        client.cached_complete(USER)
        (entry,) = list(tmp_path.rglob("*.json"))
        entry.write_text("{not json")
        again = client.cached_complete(USER)
        assert again.attempts == 1
        assert client.counters["corrupt_cache_entries"] == 1
        assert state.requests == 2


class TestMock:
    def test_scripted_hash_match(self):
        import hashlib

        digest = hashlib.sha256(b"hello").hexdigest()
        mock = MockLlm([MockRule(response="NO_QA_FOUND", prompt_hash=digest)])
        exchange = mock.complete(USER)
        assert exchange.response_text == "NO_QA_FOUND"
        assert exchange.attempts == 1

    def test_fail_twice_then_succeed(self):
        mock = MockLlm([MockRule(response="ok", substring="hello", fail_times=2)])
        assert mock.complete(USER).attempts == 3
        assert mock.complete(USER).attempts == 1

    def test_substring_rules_in_order(self):
        mock = MockLlm([
            MockRule(response="first", substring="hello"),
            MockRule(response="fallback", substring=""),
        ])
        assert mock.complete(USER).response_text == "first"
        assert mock.complete([{"role": "user", "content": "other"}]).response_text == "fallback"

    def test_interpolation_is_deterministic(self):
        mock = MockLlm([MockRule(response="id={prompt_sha8}", substring="", interpolate=True)])
        a = mock.complete(USER).response_text
        b = mock.complete(USER).response_text
        assert a == b
        assert a != mock.complete([{"role": "user", "content": "different"}]).response_text

    def test_script_file_loading(self, tmp_path):
        script = write_jsonl(tmp_path / "script.jsonl", [
            {"substring": "hello", "response": "hi"},
            {"substring": "", "response": "default"},
        ])
        mock = build_client(LlmEndpoint(base_url=f"mock://{script}", model="m"))
        assert isinstance(mock, MockLlm)
        assert mock.complete(USER).response_text == "hi"

    def test_unmatched_prompt_raises(self):
        mock = MockLlm([MockRule(response="x", substring="nope")])
        with pytest.raises(Exception):
            mock.complete(USER)
