import json
import threading

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reliasql.gateway import (
    STUB_SENTINEL,
    CacheMissError,
    ChatRequest,
    ConfigurationError,
    LiveGateway,
    RateLimiter,
    ReplayGateway,
    ResponseCache,
    StubGateway,
    StubRule,
    TransportError,
    make_gateway,
)

REQ = ChatRequest("sys", "Question: how many patients?\nSQL:")


def failing_transport():
    def handler(request):
        raise AssertionError("network used")

    return httpx.Client(transport=httpx.MockTransport(handler))


def ok_body(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def test_stub_star_rule():
    gw = StubGateway([StubRule("SELECT 1", glob="*")])
    assert gw.complete(REQ).text == "SELECT 1"


def test_stub_sentinel_and_regex():
    gw = StubGateway([StubRule(r"echo: \1", regex=r"Question: (.*?)\n")])
    assert gw.complete(REQ).text == "echo: how many patients?"
    assert StubGateway().complete(REQ).text == STUB_SENTINEL


def test_stub_from_file(tmp_path):
    p = tmp_path / "rules.json"
    p.write_text(json.dumps({"rules": [{"glob": "*sys*", "field": "system", "response": "x"}], "sentinel": "S"}))
    gw = StubGateway.from_file(p)
    assert gw.complete(REQ).text == "x"
    assert gw.complete(ChatRequest("other", "u")).text == "S"


@given(st.text(min_size=1), st.text(), st.floats(min_value=0, max_value=2), st.integers(0, 5))
def test_cache_key_is_canonical(user, system, temp, idx):
    a = ChatRequest(system, user, temp, sample_index=idx)
    b = ChatRequest(system, user, temp, sample_index=idx)
    assert a.key() == b.key()
    assert len(a.key()) == 64
    assert ChatRequest(system, user, temp, sample_index=idx + 1).key() != a.key()


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("s", "")
    with pytest.raises(ValueError):
        ChatRequest("s", "u", temperature=-1)


def test_record_then_replay(tmp_path, monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "test-key")
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        assert request.headers["Authorization"] == "Bearer test-key"
        return httpx.Response(200, json=ok_body("SELECT 42"))

    cache_path = tmp_path / "cache.jsonl"
    live = LiveGateway(
        "https://example.invalid/v1/chat",
        cache=ResponseCache(cache_path),
        client=httpx.Client(transport=httpx.MockTransport(handler)),
        limiter=RateLimiter(0),
        models={"default": "some-model"},
    )
    first = live.complete(REQ)
    assert first.text == "SELECT 42" and not first.cached
    assert seen[0]["model"] == "some-model"
    assert seen[0]["messages"][1] == {"role": "user", "content": REQ.user_text}
    assert seen[0]["max_tokens"] == REQ.max_output_tokens

    replay = ReplayGateway(ResponseCache(cache_path))
    again = replay.complete(REQ)
    assert again.text == "SELECT 42" and again.cached
    record = json.loads(cache_path.read_text().splitlines()[0])
    assert set(record) == {"key", "request", "response"} and record["key"] == REQ.key()


def test_replay_strict_miss_carries_key(tmp_path):
    gw = ReplayGateway(ResponseCache(tmp_path / "empty.jsonl"))
    with pytest.raises(CacheMissError) as err:
        gw.complete(REQ)
    assert err.value.key == REQ.key()


def test_replay_never_touches_network(tmp_path, monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    cache = ResponseCache(tmp_path / "c.jsonl")
    cache.put(REQ, "SELECT 1")
    live = LiveGateway("https://example.invalid", cache=cache, client=failing_transport(), limiter=RateLimiter(0))
    gw = ReplayGateway(cache, "live", live)
    for _ in range(3):
        assert gw.complete(REQ).text == "SELECT 1"


def test_cache_last_write_wins_and_skips_corrupt_lines(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = ResponseCache(path)
    cache.put(REQ, "first")
    cache.put(REQ, "second")
    with path.open("a") as fh:
        fh.write("{not json\n")
    reloaded = ResponseCache(path)
    assert reloaded.get(REQ.key()) == "second"
    assert len(reloaded) == 1


def test_live_requires_credential(monkeypatch):
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    with pytest.raises(ConfigurationError, match="LLM_API_KEY"):
        LiveGateway("https://example.invalid")
    monkeypatch.setenv("OTHER_KEY", "x")
    LiveGateway("https://example.invalid", api_key_env="OTHER_KEY", client=failing_transport())


def test_live_retries_with_backoff(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json=ok_body("ok"))

    gw = LiveGateway(
        "https://example.invalid",
        client=httpx.Client(transport=httpx.MockTransport(handler)),
        limiter=RateLimiter(0),
        sleep=sleeps.append,
    )
    assert gw.complete(REQ).text == "ok"
    assert sleeps == [1.0, 2.0]


def test_live_gives_up_after_retries(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    sleeps = []

    def handler(request):
        raise httpx.ConnectError("down")

    gw = LiveGateway(
        "https://example.invalid",
        client=httpx.Client(transport=httpx.MockTransport(handler)),
        limiter=RateLimiter(0),
        sleep=sleeps.append,
    )
    with pytest.raises(TransportError):
        gw.complete(REQ)
    assert sleeps == [1.0, 2.0, 4.0]


def test_live_client_error_is_not_retried(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    sleeps = []
    gw = LiveGateway(
        "https://example.invalid",
        client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(401, text="no"))),
        limiter=RateLimiter(0),
        sleep=sleeps.append,
    )
    with pytest.raises(TransportError, match="401"):
        gw.complete(REQ)
    assert sleeps == []


def test_rate_limiter_paces_calls():
    now = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        now[0] += s

    limiter = RateLimiter(0.5, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        limiter.acquire()
    assert waits == [0.5, 0.5]
    now[0] += 10
    limiter.acquire()
    assert waits == [0.5, 0.5]


def test_stub_is_thread_safe():
    gw = StubGateway([StubRule("x", glob="*")])
    threads = [threading.Thread(target=lambda: [gw.complete(REQ) for _ in range(100)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert gw.calls == 800


def test_make_gateway_modes(tmp_path, monkeypatch):
    assert isinstance(make_gateway({"mode": "stub"}), StubGateway)
    gw = make_gateway({"mode": "replay", "cache": "c.jsonl"}, tmp_path)
    assert isinstance(gw, ReplayGateway) and gw.cache.path == tmp_path / "c.jsonl"
    with pytest.raises(ConfigurationError):
        make_gateway({"mode": "carrier-pigeon"})
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    with pytest.raises(ConfigurationError):
        make_gateway({"mode": "live", "endpoint": "https://example.invalid"})
    with pytest.raises(ConfigurationError):
        make_gateway({"mode": "replay", "miss_policy": "sometimes"})
