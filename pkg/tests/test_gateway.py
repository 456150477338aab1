import json
import threading
import time

import httpx
import pytest

from grace.gateway import (
    AuthenticationError,
    CompletionRequest,
    FunctionProvider,
    Gateway,
    HTTPChatProvider,
    ProviderReply,
    RetryPolicy,
    ScriptExhausted,
    TransientError,
    TransportError,
    estimate_tokens,
    script_provider,
)


def no_sleep(_):
    pass


def test_scripted_single_response_estimates_usage():
    gw = Gateway({"base": script_provider([("*", "hello world!")])}, sleep=no_sleep)
    result = gw.complete(CompletionRequest.user("base", "abcdefghi"))
    assert result.text == "hello world!"
    assert (result.usage.input_tokens, result.usage.output_tokens) == (3, 3)
    assert result.usage.estimated and result.usage.api_calls == 1


def test_scripted_fifo():
    p = script_provider([(None, "A"), (None, "B")])
    req = CompletionRequest.user("base", "x")
    assert [p.complete(req), p.complete(req)] == ["A", "B"]
    with pytest.raises(ScriptExhausted):
        p.complete(req)


def test_scripted_matcher_miss():
    p = script_provider([("Snarks", "yes")])
    with pytest.raises(ScriptExhausted):
        p.complete(CompletionRequest.user("base", "a question about boolean logic"))


def test_scripted_role_isolation():
    base = script_provider([("*", "b1"), ("*", "b2")], "base")
    opt = script_provider([("*", "o1"), ("*", "o2")], "opt")
    gw = Gateway({"base": base, "optimizer": opt})
    order = ["base", "optimizer", "optimizer", "base"]
    got = [gw.complete(CompletionRequest.user(role, "q")).text for role in order]
    assert got == ["b1", "o1", "o2", "b2"]


def test_scripted_first_matching_entry_and_callable():
    p = script_provider([("beta", "B"), (lambda r: "alpha" in r.text, lambda r: r.text.upper())])
    assert p.complete(CompletionRequest.user("base", "alpha")) == "ALPHA"
    assert p.complete(CompletionRequest.user("base", "beta")) == "B"
    assert p.remaining == 0


def test_role_default_temperatures():
    assert CompletionRequest.user("base", "x").temperature == 0.0
    assert CompletionRequest.user("optimizer", "x").temperature == 0.6
    with pytest.raises(ValueError):
        CompletionRequest.user("critic", "x")


def flaky(n_failures, exc=TransientError):
    count = {"n": 0}

    def fn(request):
        count["n"] += 1
        if count["n"] <= n_failures:
            raise exc("boom")
        return "ok"

    return FunctionProvider(fn)


def test_retry_then_success():
    delays = []
    gw = Gateway({"base": flaky(2)}, retry=RetryPolicy(max_attempts=5, base_delay=1), sleep=delays.append)
    assert gw.complete(CompletionRequest.user("base", "x")).text == "ok"
    assert [a.ok for a in gw.attempts] == [False, False, True]
    assert delays == [1, 2]


def test_retries_exhausted():
    gw = Gateway({"base": flaky(99)}, retry=RetryPolicy(max_attempts=3), sleep=no_sleep)
    with pytest.raises(TransportError) as info:
        gw.complete(CompletionRequest.user("base", "x"))
    assert len(info.value.attempts) == 3 and len(gw.attempts) == 3


def test_auth_error_not_retried():
    gw = Gateway({"base": flaky(99, AuthenticationError)}, sleep=no_sleep)
    with pytest.raises(AuthenticationError):
        gw.complete(CompletionRequest.user("base", "x"))
    assert len(gw.attempts) == 1


def test_missing_role():
    with pytest.raises(Exception, match="no provider"):
        Gateway({"base": flaky(0)}).complete(CompletionRequest.user("optimizer", "x"))


def test_backoff_capped():
    policy = RetryPolicy(base_delay=1, max_delay=5)
    assert [policy.delay(n) for n in range(1, 6)] == [1, 2, 4, 5, 5]


def test_estimate_tokens():
    assert [estimate_tokens(s) for s in ("", "a", "abcd", "abcde")] == [0, 1, 1, 2]


def test_provider_usage_and_reasoning_kept():
    reply = ProviderReply("answer", input_tokens=10, output_tokens=30, reasoning_tokens=20, reasoning="thoughts")
    seen = []
    gw = Gateway({"optimizer": FunctionProvider(lambda r: reply)}, on_usage=lambda role, u: seen.append((role, u)))
    result = gw.complete(CompletionRequest.user("optimizer", "x"))
    assert result.text == "answer" and result.reasoning == "thoughts"
    assert (result.usage.input_tokens, result.usage.output_tokens, result.usage.reasoning_tokens) == (10, 30, 20)
    assert not result.usage.estimated
    assert seen == [("optimizer", result.usage)]


def chat_body(content, reasoning=None):
    message = {"role": "assistant", "content": content}
    if reasoning:
        message["reasoning_content"] = reasoning
    return {
        "choices": [{"message": message}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 7, "completion_tokens_details": {"reasoning_tokens": 3}},
    }


def test_http_429_twice_then_200(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "secret")
    calls = []

    def handler(request: httpx.Request):
        calls.append(request)
        if len(calls) <= 2:
            return httpx.Response(429, json={"error": "slow down"})
        return httpx.Response(200, json=chat_body("fine", "because"))

    provider = HTTPChatProvider("m", "https://api.example/v1", "TEST_KEY", transport=httpx.MockTransport(handler))
    gw = Gateway({"base": provider}, sleep=no_sleep)
    result = gw.complete(CompletionRequest.user("base", "hi"))
    assert result.text == "fine" and result.reasoning == "because"
    assert len(calls) == 3 and len(gw.attempts) == 3
    assert (result.usage.input_tokens, result.usage.output_tokens, result.usage.reasoning_tokens) == (12, 7, 3)
    sent = json.loads(calls[0].content)
    assert sent["model"] == "m" and sent["temperature"] == 0.0
    assert sent["messages"] == [{"role": "user", "content": "hi"}]
    assert calls[0].headers["authorization"] == "Bearer secret"
    assert str(calls[0].url) == "https://api.example/v1/chat/completions"


def test_http_401_is_auth_error(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "bad")
    provider = HTTPChatProvider(
        "m", "https://api.example", "TEST_KEY", transport=httpx.MockTransport(lambda r: httpx.Response(401))
    )
    gw = Gateway({"base": provider}, sleep=no_sleep)
    with pytest.raises(AuthenticationError):
        gw.complete(CompletionRequest.user("base", "hi"))
    assert len(gw.attempts) == 1


def test_http_missing_key_env(monkeypatch):
    monkeypatch.delenv("ABSENT_KEY", raising=False)
    provider = HTTPChatProvider("m", "https://x", "ABSENT_KEY", transport=httpx.MockTransport(lambda r: httpx.Response(200)))
    with pytest.raises(AuthenticationError, match="ABSENT_KEY"):
        provider.complete(CompletionRequest.user("base", "hi"))


def test_concurrency_limit_per_role():
    active = {"now": 0, "peak": 0}
    lock = threading.Lock()

    def slow(request):
        with lock:
            active["now"] += 1
            active["peak"] = max(active["peak"], active["now"])
        time.sleep(0.01)
        with lock:
            active["now"] -= 1
        return "x"

    gw = Gateway({"base": FunctionProvider(slow)}, max_in_flight=2)
    threads = [threading.Thread(target=gw.complete, args=(CompletionRequest.user("base", "q"),)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert active["peak"] <= 2 and len(gw.attempts) == 8
