import base64
import json
import math
import threading
import time

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaugeread.calib import calibrate_row, detection_from_truth, scale_geometry
from gaugeread.llm import (MARKER, HttpBackend, MockBackend, ReadingError, ReadingRequest, ResponseCache,
                           RetryPolicy, StageMetadata, TokenBucket, TransportError, UnparseableReading,
                           build_prompt, extract_many, extract_reading, parse_reading, request_key,
                           wire_payload)
from gaugeread.raster import encode_png
from gaugeread.synth import GaugeSpec, render
from gaugeread.pipeline import preprocess

META = StageMetadata(ratio=0.37, d_m=48.5, d_n=17.945, plate_height_px=412)
PNG = encode_png(preprocess(render(GaugeSpec(waterline_cm=120.0))[0]).crop(0, 100))


class Scripted:
    """Backend replaying a list of outcomes; exceptions are raised, strings returned."""

    model = "scripted"

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0
        self.payloads = []

    def complete(self, req, payload, timeout):
        self.calls += 1
        self.payloads.append(payload)
        out = self.outcomes[min(self.calls - 1, len(self.outcomes) - 1)]
        if isinstance(out, Exception):
            raise out
        return out


def no_sleep(_):
    pass


def test_stage1_prompt_contract():
    p = build_prompt(1)
    for phrase in ("topmost visible digit", "full number sequence from top to bottom",
                   "partially visible digit at the lowest edge", "gauge plate follows a 1-cm resolution"):
        assert phrase in p
    assert p.splitlines()[-1].endswith(f"`{MARKER} <number>`.")
    assert "metadata" not in p.lower()


def test_stage2_prompt_carries_metadata():
    p = build_prompt(2, META)
    assert "0.37" in p and "48.5" in p and "17.945" in p and "412" in p
    assert "topmost visible digit" in p
    with pytest.raises(ValueError):
        build_prompt(2)
    with pytest.raises(ValueError):
        build_prompt(1, META)
    with pytest.raises(ValueError):
        build_prompt(3)


def test_request_stage_metadata_consistency():
    with pytest.raises(ValueError):
        ReadingRequest("a", PNG, 2)
    with pytest.raises(ValueError):
        ReadingRequest("a", PNG, 1, META)


@pytest.mark.parametrize("text,value", [
    ("reasoning...\nREADING_CM: 116.3", 116.3),
    ("The level is about 115 cm", 115.0),
    ("READING_CM: 120 then READING_CM: 118.5", 118.5),
    ("I think 130, no wait.\nREADING_CM:   99", 99.0),
    ("levels 1.5 and 2.25", 2.25),
])
def test_parse_reading_examples(text, value):
    assert parse_reading(text) == value


@pytest.mark.parametrize("text", ["cannot determine", "", "READING_CM: -4", "reading -12", "READING_CM: 1e400"])
def test_parse_reading_rejects(text):
    with pytest.raises(UnparseableReading):
        parse_reading(text)


@given(st.text())
def test_parse_reading_is_total(text):
    try:
        v = parse_reading(text)
    except UnparseableReading:
        return
    assert math.isfinite(v) and v >= 0


def test_stage1_wire_payload_never_carries_geometry():
    p1 = wire_payload(ReadingRequest("a", PNG, 1), "m")
    assert set(p1) == {"model", "prompt", "image_base64"}
    text = json.dumps(p1)
    for token in ("ratio", "d_m", "d_n", "plate_height", "H_y", "0.37", "48.5", "17.945"):
        assert token not in text
    p2 = wire_payload(ReadingRequest("a", PNG, 2, META), "m")
    assert p2["metadata"] == META.to_dict()
    assert base64.b64decode(p2["image_base64"]) == PNG


@given(st.integers(1, 2), st.floats(0, 1), st.floats(1, 100), st.floats(0, 100), st.integers(1, 999),
       st.integers(1, 2), st.floats(0, 1), st.floats(1, 100), st.floats(0, 100), st.integers(1, 999))
def test_cache_key_distinguishes_stage_and_metadata(s1, r1, m1, n1, h1, s2, r2, m2, n2, h2):
    def req(s, r, m, n, h):
        return ReadingRequest("x", PNG, s, StageMetadata(r, m, n, h) if s == 2 else None)

    a, b = req(s1, r1, m1, n1, h1), req(s2, r2, m2, n2, h2)
    same = (a.stage == b.stage) and (a.metadata == b.metadata)
    assert (request_key(a) == request_key(b)) == same


def test_cache_key_depends_on_image_and_model_tag():
    base = ReadingRequest("x", PNG, 1)
    assert request_key(base) != request_key(ReadingRequest("x", PNG + b"\0", 1))
    assert request_key(base) != request_key(ReadingRequest("x", PNG, 1, model_tag="other"))
    assert request_key(base) == request_key(ReadingRequest("other-id", PNG, 1))


def test_cache_hit_is_byte_identical(tmp_path):
    cache = ResponseCache(tmp_path / "c")
    backend = Scripted(["looks like READING_CM: 101.5"])
    req = ReadingRequest("x", PNG, 2, META)
    first = extract_reading(req, backend, cache, sleep=no_sleep)
    stored = cache.path(request_key(req)).read_bytes()
    second = extract_reading(req, backend, cache, sleep=no_sleep)
    assert backend.calls == 1
    assert first.attempts == 1 and second.attempts == 0 and second.cached
    assert second.raw_text.encode() == first.raw_text.encode()
    assert second.reading_cm == first.reading_cm == 101.5
    assert cache.path(request_key(req)).read_bytes() == stored
    entry = json.loads(stored)
    assert entry["key"] == request_key(req) and entry["raw_text"] == first.raw_text


def test_retry_gives_up_after_three_attempts():
    delays = []
    backend = Scripted([TransportError("timed out")])
    with pytest.raises(ReadingError) as err:
        extract_reading(ReadingRequest("x", PNG, 1), backend, sleep=delays.append)
    assert backend.calls == 3 and err.value.attempts == 3
    assert len(delays) == 2
    assert 0.8 <= delays[0] <= 1.2 and 1.6 <= delays[1] <= 2.4


def test_retry_recovers_and_counts_attempts():
    backend = Scripted([TransportError("reset"), TransportError("reset"), "READING_CM: 77"])
    resp = extract_reading(ReadingRequest("x", PNG, 1), backend, sleep=no_sleep)
    assert resp.attempts == 3 and resp.reading_cm == 77


def test_backoff_schedule_with_jitter():
    import random
    pol = RetryPolicy()
    rng = random.Random(0)
    for retry, base in ((1, 1.0), (2, 2.0), (3, 4.0)):
        for _ in range(50):
            assert base * 0.8 <= pol.delay(retry, rng) <= base * 1.2
    assert pol.timeout_s == 30.0 and pol.attempts == 3


def test_unparseable_is_not_retried_and_is_cached(tmp_path):
    cache = ResponseCache(tmp_path)
    backend = Scripted(["no idea"])
    req = ReadingRequest("x", PNG, 1)
    for _ in range(2):
        with pytest.raises(UnparseableReading):
            extract_reading(req, backend, cache, sleep=no_sleep)
    assert backend.calls == 1


def test_mock_backend_stage2_equals_geometric_reading():
    img, gt = render(GaugeSpec(waterline_cm=137.4, px_per_cm=5.0))
    gray = preprocess(img)
    det = detection_from_truth(gt)
    wl = gt.waterline_row
    geo = scale_geometry(det, wl)
    expected = calibrate_row(det, wl).reading_cm
    crop = encode_png(gray.crop(0, wl + 1))
    backend = MockBackend({"g": gt})
    meta = StageMetadata(geo.ratio, geo.d_m, geo.d_n, geo.plate_height_px)
    r2 = extract_reading(ReadingRequest("g", crop, 2, meta), backend)
    assert r2.reading_cm == expected
    r1 = extract_reading(ReadingRequest("g", crop, 1), backend)
    assert r1.reading_cm == calibrate_row(det, wl).major_reading_cm
    with pytest.raises(UnparseableReading):
        extract_reading(ReadingRequest("unknown", crop, 1), backend)


def json_handler(body, status=200, seen=None):
    def handler(request):
        if seen is not None:
            seen.append(request)
        return httpx.Response(status, json=body)
    return handler


@pytest.mark.parametrize("adapter,body", [
    ("generic", {"text": "READING_CM: 55.5"}),
    ("openai", {"choices": [{"message": {"content": "READING_CM: 55.5"}}]}),
    ("gemini", {"candidates": [{"content": {"parts": [{"text": "READING_CM: 55.5"}]}}]}),
])
def test_http_adapters(adapter, body):
    seen = []
    client = httpx.Client(transport=httpx.MockTransport(json_handler(body, seen=seen)))
    backend = HttpBackend("https://llm.invalid/v1", "secret", "vision-x", adapter, client)
    resp = extract_reading(ReadingRequest("x", PNG, 2, META), backend, sleep=no_sleep)
    assert resp.reading_cm == 55.5
    sent = json.loads(seen[0].content)
    assert seen[0].headers["authorization"] == "Bearer secret"
    assert base64.b64encode(PNG).decode() in json.dumps(sent)
    if adapter == "generic":
        assert sent["model"] == "vision-x" and sent["metadata"]["ratio"] == 0.37


def test_http_server_errors_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"text": "READING_CM: 12"})

    backend = HttpBackend("https://llm.invalid", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert extract_reading(ReadingRequest("x", PNG, 1), backend, sleep=no_sleep).attempts == 3


def test_http_timeouts_exhaust_retries():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    backend = HttpBackend("https://llm.invalid", client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(ReadingError) as err:
        extract_reading(ReadingRequest("x", PNG, 1), backend, sleep=no_sleep)
    assert err.value.attempts == 3


def test_http_backend_from_env(monkeypatch):
    monkeypatch.delenv("GAUGE_LLM_ENDPOINT", raising=False)
    with pytest.raises(ValueError):
        HttpBackend.from_env()
    monkeypatch.setenv("GAUGE_LLM_ENDPOINT", "https://e.invalid")
    monkeypatch.setenv("GAUGE_LLM_API_KEY", "k")
    monkeypatch.setenv("GAUGE_LLM_MODEL", "mm")
    b = HttpBackend.from_env("openai")
    assert (b.endpoint, b.api_key, b.model, b.adapter) == ("https://e.invalid", "k", "mm", "openai")
    with pytest.raises(ValueError):
        HttpBackend("x", adapter="nope")


def test_extract_many_bounds_concurrency_and_keeps_order():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    class Slow:
        model = "slow"

        def complete(self, req, payload, timeout):
            with lock:
                state["now"] += 1
                state["peak"] = max(state["peak"], state["now"])
            time.sleep(0.02)
            with lock:
                state["now"] -= 1
            return f"READING_CM: {req.image_id[1:]}"

    reqs = [ReadingRequest(f"r{i}", PNG + bytes([i]), 1) for i in range(16)]
    out = extract_many(reqs, Slow(), max_in_flight=3)
    assert [o.response.reading_cm for o in out] == [float(i) for i in range(16)]
    assert 1 <= state["peak"] <= 3


def test_token_bucket_paces_requests():
    t = {"now": 0.0}
    slept = []

    def sleep(d):
        slept.append(d)
        t["now"] += d

    bucket = TokenBucket(rate_per_s=2.0, capacity=1, clock=lambda: t["now"], sleep=sleep)
    for _ in range(5):
        bucket.acquire()
    assert abs(t["now"] - 2.0) < 1e-9  # first is free, then one every 0.5 s
    with pytest.raises(ValueError):
        TokenBucket(0)


def test_cache_concurrent_writers(tmp_path):
    cache = ResponseCache(tmp_path)
    backend = Scripted(["READING_CM: 5"])
    reqs = [ReadingRequest("x", PNG, 1)] * 8
    out = extract_many(reqs, backend, cache, max_in_flight=4)
    assert all(o.response.reading_cm == 5 for o in out)
    assert len(list(tmp_path.glob("*.json"))) == 1
    assert not list(tmp_path.glob("*.tmp"))
