from __future__ import annotations

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from tablepanel.gateway import (
    ApiError,
    BackendConfig,
    ChatMessage,
    ChatRequest,
    MissingApiKey,
    OpenAIChatBackend,
    ScriptedBackend,
    ScriptEntry,
    ScriptExhausted,
    TransportError,
)


def req(content: str = "hello") -> ChatRequest:
    return ChatRequest(
        messages=(ChatMessage("system", "sys"), ChatMessage("user", content)),
        model_name="m",
        temperature=0.0,
    )


class TestChatRequest:
    def test_first_message_must_be_system(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage("user", "x"),), model_name="m", temperature=0.0)

    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(), model_name="m", temperature=0.0)

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage("system", "s"),), model_name="m", temperature=-1.0)


class TestScriptedBackend:
    def test_replays_in_order(self):
        backend = ScriptedBackend(["ANSWER: 42", "second"])
        assert backend.complete(req()) == "ANSWER: 42"
        assert backend.complete(req()) == "second"

    def test_strict_empty_script_raises(self):
        backend = ScriptedBackend([])
        with pytest.raises(ScriptExhausted):
            backend.complete(req())

    def test_non_strict_returns_fallback(self):
        backend = ScriptedBackend([], strict=False, fallback="fallback")
        assert backend.complete(req()) == "fallback"

    def test_matcher_selects_first_matching_entry(self):
        backend = ScriptedBackend([
            ScriptEntry("for b", matcher="bravo"),
            ScriptEntry("for a", matcher="alpha"),
        ])
        assert backend.complete(req("alpha call")) == "for a"
        assert backend.complete(req("bravo call")) == "for b"

    def test_callable_matcher(self):
        backend = ScriptedBackend([ScriptEntry("yes", matcher=lambda t: t.endswith("!"))])
        assert backend.complete(req("go!")) == "yes"

    def test_entries_consumed_once(self):
        backend = ScriptedBackend([ScriptEntry("only", matcher="x")])
        assert backend.complete(req("x")) == "only"
        with pytest.raises(ScriptExhausted):
            backend.complete(req("x"))

    def test_deterministic_for_identical_request_sequences(self):
        script = ["a", "b", ScriptEntry("c", matcher="three")]
        outs1 = [ScriptedBackend(list(script)).complete(req(f"call {i}")) for i in range(2)]
        outs2 = [ScriptedBackend(list(script)).complete(req(f"call {i}")) for i in range(2)]
        assert outs1 == outs2

    def test_count_calls_counts_failures_too(self):
        backend = ScriptedBackend(["one"])
        assert backend.count_calls() == 0
        backend.complete(req())
        with pytest.raises(ScriptExhausted):
            backend.complete(req())
        assert backend.count_calls() == 2


class _StubHandler(BaseHTTPRequestHandler):
    """Scripted HTTP responses; records request headers and bodies."""

    plan: list = []
    seen: list = []
    lock = threading.Lock()

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        with self.lock:
            type(self).seen.append({
                "path": self.path,
                "auth": self.headers.get("Authorization"),
                "body": json.loads(body),
            })
            status, payload = type(self).plan.pop(0) if type(self).plan else (200, None)
        if payload is None:
            payload = {"choices": [{"message": {"content": "ok"}}]}
        blob = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.plan = []
    _StubHandler.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def live_backend(base_url: str, retries: int = 3) -> OpenAIChatBackend:
    config = BackendConfig(
        base_url=base_url,
        model_name="test-model",
        api_key_env_var="PANEL_API_KEY",
        temperature=0.5,
        request_timeout=5.0,
        max_retries=retries,
        retry_backoff_base=0.001,
    )
    return OpenAIChatBackend(config, rng=random.Random(0))


class TestOpenAIChatBackend:
    def test_success_returns_message_content(self, stub_server, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-test")
        backend = live_backend(stub_server)
        assert backend.complete(req()) == "ok"
        call = _StubHandler.seen[0]
        assert call["path"] == "/chat/completions"
        assert call["body"]["model"] == "m"
        assert call["body"]["temperature"] == 0.0
        assert call["body"]["messages"][0] == {"role": "system", "content": "sys"}

    def test_key_sent_only_in_authorization_header(self, stub_server, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-secret")
        backend = live_backend(stub_server)
        backend.complete(req())
        call = _StubHandler.seen[0]
        assert call["auth"] == "Bearer sk-secret"
        assert "sk-secret" not in json.dumps(call["body"])

    def test_retries_on_429_then_succeeds(self, stub_server, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-test")
        _StubHandler.plan = [(429, {}), (429, {}), (200, None)]
        backend = live_backend(stub_server)
        assert backend.complete(req()) == "ok"
        assert len(_StubHandler.seen) == 3  # 2 retries after 2 rate limits
        assert backend.count_calls() == 1  # one logical call

    def test_retries_on_5xx_until_exhausted(self, stub_server, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-test")
        _StubHandler.plan = [(500, {})] * 3
        backend = live_backend(stub_server, retries=2)
        with pytest.raises(ApiError) as err:
            backend.complete(req())
        assert err.value.status == 500
        assert len(_StubHandler.seen) == 3  # 1 + max_retries attempts

    def test_4xx_fails_immediately_without_retry(self, stub_server, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-test")
        _StubHandler.plan = [(400, {"error": "bad"})]
        backend = live_backend(stub_server)
        with pytest.raises(ApiError) as err:
            backend.complete(req())
        assert err.value.status == 400
        assert len(_StubHandler.seen) == 1

    def test_transport_error_after_retries(self, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-test")
        backend = live_backend("http://127.0.0.1:1", retries=1)  # nothing listens
        with pytest.raises(TransportError):
            backend.complete(req())
        assert backend.count_calls() == 1

    def test_malformed_2xx_body_is_api_error(self, stub_server, monkeypatch):
        monkeypatch.setenv("PANEL_API_KEY", "sk-test")
        _StubHandler.plan = [(200, {"unexpected": True})]
        backend = live_backend(stub_server, retries=0)
        with pytest.raises(ApiError):
            backend.complete(req())

    def test_missing_api_key_raises(self, stub_server, monkeypatch):
        monkeypatch.delenv("PANEL_API_KEY", raising=False)
        backend = live_backend(stub_server)
        with pytest.raises(MissingApiKey):
            backend.complete(req())

    def test_empty_env_var_name_sends_no_auth_header(self, stub_server):
        config = BackendConfig(base_url=stub_server, model_name="m", api_key_env_var="",
                               request_timeout=5.0, max_retries=0)
        backend = OpenAIChatBackend(config)
        assert backend.complete(req()) == "ok"
        assert _StubHandler.seen[0]["auth"] is None


class TestBackendConfig:
    def test_retry_cap(self):
        with pytest.raises(ValueError):
            BackendConfig(base_url="http://x", model_name="m", max_retries=11)

    def test_timeout_positive(self):
        with pytest.raises(ValueError):
            BackendConfig(base_url="http://x", model_name="m", request_timeout=0)
