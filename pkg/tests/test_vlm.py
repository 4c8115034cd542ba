import base64
import json
import threading

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from blendforge import vlm
from blendforge.vlm import (
    GatewayError, OpenAIGateway, StubGateway, UnparseableCaption, UnparseableVerdict, Verdict,
    caption_image, filter_image, format_verdict, map_bounded, parse_caption, parse_verdict,
)

IMG = np.full((4, 4, 3), 120, dtype=np.uint8)
X = UnparseableVerdict

VERDICTS = [
    ("GOOD: clear chair with context", True, "clear chair with context"),
    ("BAD: extreme close-up of surface", False, "extreme close-up of surface"),
    ("The image looks fine to me.", X, None),
    ('"GOOD: red sphere on plane"', True, "red sphere on plane"),
    ("  BAD: mostly empty floor  \n", False, "mostly empty floor"),
    ("'BAD: ambiguous clutter'", False, "ambiguous clutter"),
    ("“GOOD: a lamp on a desk”", True, "a lamp on a desk"),
    ("`GOOD: in backticks`", True, "in backticks"),
    ("GOOD: reason with: a colon", True, "reason with: a colon"),
    ("BAD:no space after colon", False, "no space after colon"),
    ("good: lowercase prefix", X, None),
    ("GOOD:", X, None),
    ("BAD:    ", X, None),
    ("GOOD: first\nBAD: second", X, None),
    ("GOOD: one\r\ntwo", X, None),
    ("GOOD - dash instead of colon", X, None),
    ("Verdict: GOOD: chair", X, None),
    ("GOOD : space before colon", X, None),
    ("", X, None),
    (None, X, None),
]


def test_table_has_twenty_cases():
    assert len(VERDICTS) == 20


@pytest.mark.parametrize("raw,accepted,reason", VERDICTS)
def test_parse_verdict_table(raw, accepted, reason):
    if accepted is X:
        with pytest.raises(UnparseableVerdict):
            parse_verdict(raw)
    else:
        assert parse_verdict(raw) == Verdict(accepted, reason)


@given(st.text())
def test_parse_verdict_total(raw):
    try:
        v = parse_verdict(raw)
    except UnparseableVerdict:
        return
    assert v.reason and "\n" not in v.reason


@given(st.booleans(), st.text(alphabet=st.characters(blacklist_categories=("Cc", "Zl", "Zp", "Cs")), min_size=1)
       .map(str.strip).filter(lambda s: s and s[0] not in "\"'`“" and s[-1] not in "\"'`”"))
def test_format_parse_idempotent(accepted, reason):
    v = Verdict(accepted, reason)
    assert parse_verdict(format_verdict(v)) == v


def test_filter_retry_then_reject():
    stub = StubGateway(responses={"a": ["garbage", "still garbage", "nope"]})
    v = filter_image(stub, IMG, image_id="a")
    assert v == Verdict(False, "unparseable")
    assert stub.calls == ["a", "a", "a"]


def test_filter_retry_recovers():
    stub = StubGateway(responses={"a": ["garbage", "GOOD: recognizable red sphere on plane"]})
    assert filter_image(stub, IMG, image_id="a").accepted
    assert len(stub.calls) == 2


def test_stub_pass_through_and_error():
    stub = StubGateway(default="GOOD: recognizable red sphere on plane", responses={"e": {"error": 500}})
    assert filter_image(stub, IMG, image_id="x").accepted
    with pytest.raises(GatewayError):
        filter_image(stub, IMG, image_id="e")


def test_caption_examples():
    c = parse_caption("Three trees standing on a grassy field under a cloudy sky.")
    assert (c.word_count, c.length_warning) == (11, False)
    c = parse_caption('"A chair."')
    assert (c.text, c.word_count, c.length_warning) == ("A chair.", 2, True)
    with pytest.raises(UnparseableCaption):
        parse_caption("line1\nline2")
    with pytest.raises(UnparseableCaption):
        parse_caption("   ")


def test_caption_retries_then_raises():
    stub = StubGateway(captions={"a": ["", "x\ny", "two\nlines"]})
    with pytest.raises(UnparseableCaption):
        caption_image(stub, IMG, image_id="a")
    assert len(stub.calls) == 3
    stub = StubGateway(captions={"a": ["", "A red ball rests near the wall of a small gray room."]})
    assert caption_image(stub, IMG, image_id="a").word_count == 12


def test_stub_tasks_are_separate(tmp_path):
    p = tmp_path / "stub.json"
    p.write_text(json.dumps({"filter": {"a": "BAD: blurry"}, "default": {"caption": "A cat sitting on a red mat by the door."}}))
    stub = StubGateway.from_file(p)
    assert not filter_image(stub, IMG, image_id="a").accepted
    assert caption_image(stub, IMG, image_id="a").word_count == 10
    with pytest.raises(GatewayError):
        filter_image(stub, IMG, image_id="unknown")


def test_prompts_shipped():
    assert "Output exactly one line" in vlm.FILTER_PROMPT
    assert "8" in vlm.CAPTION_PROMPT and "20" in vlm.CAPTION_PROMPT


def test_concurrency_bound():
    stub = StubGateway(default="GOOD: fine", delay=0.01)
    out = map_bounded(lambda i: filter_image(stub, IMG, image_id=str(i)), range(40), max_in_flight=3)
    assert all(v.accepted for v in out)
    assert 1 < stub.max_seen <= 3


def test_map_bounded_keeps_order_and_errors():
    def f(i):
        if i == 2:
            raise RuntimeError("boom")
        return i * i
    out = map_bounded(f, range(5), max_in_flight=4)
    assert out[:2] == [0, 1] and out[3:] == [9, 16]
    assert isinstance(out[2], RuntimeError)


# -- HTTP -----------------------------------------------------------------------


def _ok(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def test_http_payload_and_auth():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _ok("GOOD: a table with two chairs")

    gw = OpenAIGateway("http://vlm.local", api_key="k", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert filter_image(gw, IMG, prompt="P", image_id="a").accepted
    assert seen["url"] == "http://vlm.local/v1/chat/completions"
    assert seen["auth"] == "Bearer k"
    body = seen["body"]
    assert body["model"] == "Qwen3-VL-8B-Instruct" and body["temperature"] == 0
    text, image = body["messages"][0]["content"]
    assert text == {"type": "text", "text": "P"}
    uri = image["image_url"]["url"]
    assert uri.startswith("data:image/png;base64,")
    assert base64.b64decode(uri.split(",", 1)[1])[:8] == b"\x89PNG\r\n\x1a\n"


def test_http_api_key_from_env(monkeypatch):
    monkeypatch.setenv("BLENDFORGE_VLM_API_KEY", "from-env")
    got = []
    gw = OpenAIGateway("http://x/v1", client=httpx.Client(transport=httpx.MockTransport(
        lambda r: got.append(r.headers.get("authorization")) or _ok("GOOD: ok"))))
    gw.complete(vlm.VlmRequest("p", b"png"))
    assert got == ["Bearer from-env"]


def test_http_500_retries_then_gateway_error():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, text="upstream down")

    gw = OpenAIGateway("http://vlm.local", client=httpx.Client(transport=httpx.MockTransport(handler)),
                       sleep=sleeps.append, seed=0)
    with pytest.raises(GatewayError) as err:
        filter_image(gw, IMG, image_id="a")
    assert err.value.status == 500
    assert len(calls) == 4
    # exponential backoff with jitter in [0.5, 1.5) x base * 2^k
    assert len(sleeps) == 3
    for k, s in enumerate(sleeps):
        assert 0.5 * 2 ** k <= s < 1.5 * 2 ** k


def test_http_transient_then_ok():
    script = iter([httpx.Response(429), httpx.Response(503), _ok("BAD: mostly empty wall")])
    gw = OpenAIGateway("http://h", client=httpx.Client(transport=httpx.MockTransport(lambda r: next(script))),
                       sleep=lambda s: None)
    assert not filter_image(gw, IMG).accepted


def test_http_4xx_is_not_retried():
    calls = []
    gw = OpenAIGateway("http://h", client=httpx.Client(transport=httpx.MockTransport(
        lambda r: calls.append(1) or httpx.Response(400, text="bad"))), sleep=lambda s: None)
    with pytest.raises(GatewayError):
        gw.complete(vlm.VlmRequest("p", b"png"))
    assert len(calls) == 1


def test_http_in_flight_cap():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}
    gate = threading.Event()

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        gate.wait(0.02)
        with lock:
            state["now"] -= 1
        return _ok("GOOD: ok")

    gw = OpenAIGateway("http://h", max_in_flight=2, client=httpx.Client(transport=httpx.MockTransport(handler)))
    map_bounded(lambda i: gw.complete(vlm.VlmRequest("p", b"png")), range(12), max_in_flight=6)
    assert state["peak"] <= 2
