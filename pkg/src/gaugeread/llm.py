"""Two-stage multimodal reading client: prompt, wire payload, backends, cache, retry.

Stage 1 sends only the preprocessed, waterline-cropped image. Stage 2 adds a
metadata block with the scale-gap ratio and the pixel geometry behind it.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import random
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import httpx

from gaugeread.raster import decode_image
from gaugeread.synth import GroundTruth

PROMPT_VERSION = "1"
MARKER = "READING_CM:"
METADATA_FIELDS = ("ratio", "d_m", "d_n", "plate_height_px")

ENV_ENDPOINT = "GAUGE_LLM_ENDPOINT"
ENV_API_KEY = "GAUGE_LLM_API_KEY"
ENV_MODEL = "GAUGE_LLM_MODEL"


class UnparseableReading(ValueError):
    pass


class TransportError(RuntimeError):
    """Network-level failure worth retrying (timeouts, refused connections, 5xx)."""


class ReadingError(RuntimeError):
    def __init__(self, message: str, attempts: int) -> None:
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class StageMetadata:
    ratio: float
    d_m: float
    d_n: float
    plate_height_px: int

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "d_m": self.d_m, "d_n": self.d_n, "plate_height_px": self.plate_height_px}


@dataclass(frozen=True)
class ReadingRequest:
    image_id: str
    image_bytes: bytes
    stage: int
    metadata: StageMetadata | None = None
    model_tag: str = "mock"

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and self.metadata is None:
            raise ValueError("stage 2 requires scale-gap metadata")
        if self.stage == 1 and self.metadata is not None:
            raise ValueError("stage 1 must not carry metadata")


@dataclass(frozen=True)
class ReadingResponse:
    reading_cm: float | None
    raw_text: str
    latency_ms: float
    attempts: int
    cached: bool = False


def build_prompt(stage: int, metadata: StageMetadata | None = None) -> str:
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and metadata is None:
        raise ValueError("stage 2 prompt needs metadata")
    if stage == 1 and metadata is not None:
        raise ValueError("stage 1 prompt takes no metadata")
    lines = [
        "You are reading a river staff gauge. The image is cropped so that its bottom row is the detected waterline.",
        "Bold numerals mark every 10 cm and increase upward; triangular ticks mark each centimetre.",
        "1. Identify the topmost visible digit on the gauge plate.",
        "2. Determine the full number sequence from top to bottom.",
        "3. Detect any partially visible digit at the lowest edge, where the plate meets the water.",
        "4. The gauge plate follows a 1-cm resolution; report the water level in centimetres.",
    ]
    if stage == 2:
        m = metadata
        lines += [
            "",
            "Geometric metadata measured on this image:",
            f"- scale gap ratio R: {m.ratio!r}",
            f"- major scale gap d_m (px between consecutive numerals): {m.d_m!r}",
            f"- waterline gap d_n (px from the lowest numeral above the water to the waterline): {m.d_n!r}",
            f"- gauge plate height H_y (px): {m.plate_height_px!r}",
            "Convert pixels to centimetres with this metadata: the reading is the value of the lowest",
            "fully visible numeral minus R times 10 cm.",
        ]
    lines += ["", f"Answer with your reasoning, then a final line formatted exactly as `{MARKER} <number>`."]
    return "\n".join(lines)


_NUMBER = r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?"
_MARKED = re.compile(re.escape(MARKER) + r"\s*(" + _NUMBER + r")")
_STANDALONE = re.compile(r"(?<![\w.])(" + _NUMBER + r")(?!\.?\d)")


def _checked(value: float, raw: str) -> float:
    if not math.isfinite(value) or value < 0:
        raise UnparseableReading(f"reading {raw!r} is negative or not finite")
    return value


def parse_reading(raw_text: str) -> float:
    """Number after the last READING_CM marker, else the last standalone number."""
    marked = _MARKED.findall(raw_text)
    if marked:
        return _checked(float(marked[-1]), marked[-1])
    loose = _STANDALONE.findall(raw_text)
    if loose:
        return _checked(float(loose[-1]), loose[-1])
    raise UnparseableReading("unparseable: no number in model response")


def wire_payload(req: ReadingRequest, model: str) -> dict:
    """Provider-neutral JSON body. Only stage 2 has a ``metadata`` key."""
    body = {
        "model": model,
        "prompt": build_prompt(req.stage, req.metadata),
        "image_base64": base64.b64encode(req.image_bytes).decode("ascii"),
    }
    if req.stage == 2:
        body["metadata"] = req.metadata.to_dict()
    return body


def request_key(req: ReadingRequest) -> str:
    ident = {
        "prompt_version": PROMPT_VERSION,
        "image_sha256": hashlib.sha256(req.image_bytes).hexdigest(),
        "stage": req.stage,
        "metadata": None if req.metadata is None else req.metadata.to_dict(),
        "model_tag": req.model_tag,
    }
    return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()


# -- backends ------------------------------------------------------------------

class Backend(Protocol):
    model: str

    def complete(self, req: ReadingRequest, payload: dict, timeout: float) -> str: ...


class MockBackend:
    """Perfect numeral reader backed by renderer ground truth.

    The image's last row is taken as the waterline. The reader finds the lowest
    numbered mark at or above it; stage 1 answers that numeral, stage 2 applies
    the supplied ratio to it, which makes it agree with the geometric reading.
    """

    model = "mock"

    def __init__(self, truths: dict[str, GroundTruth]) -> None:
        self.truths = truths

    def complete(self, req: ReadingRequest, payload: dict, timeout: float) -> str:
        gt = self.truths.get(req.image_id)
        if gt is None:
            return "I cannot see a gauge plate in this image."
        waterline = decode_image(base64.b64decode(payload["image_base64"])).height - 1
        above = [k for k in gt.major_keypoints if k.row <= waterline]
        if not above:
            return "No numeral is visible above the water."
        anchor = max(above, key=lambda k: k.row)
        value = float(anchor.value_cm)
        if req.stage == 2:
            value = value - payload["metadata"]["ratio"] * 10.0
        return f"The lowest fully visible numeral is {anchor.value_cm}.\n{MARKER} {value!r}"


def _openai_body(payload: dict) -> dict:
    url = "data:image/png;base64," + payload["image_base64"]
    return {"model": payload["model"], "messages": [{"role": "user", "content": [
        {"type": "text", "text": payload["prompt"]},
        {"type": "image_url", "image_url": {"url": url}},
    ]}]}


def _gemini_body(payload: dict) -> dict:
    return {"contents": [{"parts": [
        {"text": payload["prompt"]},
        {"inline_data": {"mime_type": "image/png", "data": payload["image_base64"]}},
    ]}]}


def _generic_text(data: dict) -> str:
    return data.get("text") or data["output"]


def _openai_text(data: dict) -> str:
    return data["choices"][0]["message"]["content"]


def _gemini_text(data: dict) -> str:
    return "".join(p.get("text", "") for p in data["candidates"][0]["content"]["parts"])


ADAPTERS: dict[str, tuple[Callable[[dict], dict], Callable[[dict], str]]] = {
    "generic": (lambda p: p, _generic_text),
    "openai": (_openai_body, _openai_text),
    "gemini": (_gemini_body, _gemini_text),
}


class HttpBackend:
    """POSTs the payload to an HTTP endpoint through a vendor adapter."""

    def __init__(self, endpoint: str, api_key: str | None = None, model: str = "generic",
                 adapter: str = "generic", client: httpx.Client | None = None) -> None:
        if adapter not in ADAPTERS:
            raise ValueError(f"unknown adapter {adapter!r}; choose from {sorted(ADAPTERS)}")
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.adapter = adapter
        self.client = client or httpx.Client()

    @classmethod
    def from_env(cls, adapter: str = "generic", client: httpx.Client | None = None) -> HttpBackend:
        endpoint = os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            raise ValueError(f"{ENV_ENDPOINT} is not set")
        return cls(endpoint, os.environ.get(ENV_API_KEY), os.environ.get(ENV_MODEL, "generic"), adapter, client)

    def complete(self, req: ReadingRequest, payload: dict, timeout: float) -> str:
        to_body, to_text = ADAPTERS[self.adapter]
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(self.endpoint, json=to_body(payload), headers=headers, timeout=timeout)
        except httpx.TransportError as e:
            raise TransportError(f"{type(e).__name__}: {e}") from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        resp.raise_for_status()
        try:
            return to_text(resp.json())
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise UnparseableReading(f"unexpected response shape: {e}") from e


# -- cache, retry, rate limit --------------------------------------------------

class ResponseCache:
    """Content-addressed JSON files; writes are atomic renames."""

    def __init__(self, root: str | Path = ".cache/llm") -> None:
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> dict | None:
        try:
            return json.loads(self.path(key).read_text())
        except FileNotFoundError:
            return None

    def put(self, key: str, entry: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        target = self.path(key)
        if target.exists():
            return  # entries are immutable once stored
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps(entry, sort_keys=True, indent=1) + "\n")
        os.replace(tmp, target)


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    base_delay_s: float = 1.0
    jitter: float = 0.2
    timeout_s: float = 30.0

    def delay(self, retry: int, rng: random.Random) -> float:
        """Sleep before retry number ``retry`` (1-based): 1 s, 2 s, 4 s, ... +/- jitter."""
        base = self.base_delay_s * 2 ** (retry - 1)
        return base * (1 + rng.uniform(-self.jitter, self.jitter))


class TokenBucket:
    def __init__(self, rate_per_s: float, capacity: int = 1,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep) -> None:
        if rate_per_s <= 0 or capacity < 1:
            raise ValueError("rate must be positive and capacity at least 1")
        self.rate = rate_per_s
        self.capacity = capacity
        self.clock = clock
        self.sleep = sleep
        self.tokens = float(capacity)
        self.stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


def _from_entry(entry: dict) -> ReadingResponse:
    return ReadingResponse(reading_cm=entry["reading_cm"], raw_text=entry["raw_text"],
                           latency_ms=0.0, attempts=0, cached=True)


def extract_reading(req: ReadingRequest, backend: Backend, cache: ResponseCache | None = None,
                    policy: RetryPolicy = RetryPolicy(), sleep: Callable[[float], None] = time.sleep,
                    rng: random.Random | None = None, limiter: TokenBucket | None = None) -> ReadingResponse:
    key = request_key(req)
    if cache is not None:
        entry = cache.get(key)
        if entry is not None:
            if entry["reading_cm"] is None:
                raise UnparseableReading(f"cached response for {req.image_id} is unparseable")
            return _from_entry(entry)

    rng = rng or random.Random(key)
    payload = wire_payload(req, backend.model)
    start = time.perf_counter()
    raw = None
    for attempt in range(1, policy.attempts + 1):
        if limiter is not None:
            limiter.acquire()
        try:
            raw = backend.complete(req, payload, policy.timeout_s)
            break
        except TransportError as e:
            if attempt == policy.attempts:
                raise ReadingError(f"{req.image_id}: transport failed after {attempt} attempts: {e}", attempt) from e
            sleep(policy.delay(attempt, rng))
    latency = (time.perf_counter() - start) * 1000.0

    try:
        value = parse_reading(raw)
    except UnparseableReading:
        value = None
    if cache is not None:
        cache.put(key, {"key": key, "image_id": req.image_id, "stage": req.stage,
                        "model_tag": req.model_tag, "raw_text": raw, "reading_cm": value})
    if value is None:
        raise UnparseableReading(f"{req.image_id}: unparseable response {raw[:80]!r}")
    return ReadingResponse(reading_cm=value, raw_text=raw, latency_ms=latency, attempts=attempt)


@dataclass(frozen=True)
class ReadOutcome:
    request: ReadingRequest
    response: ReadingResponse | None
    error: str | None


def extract_many(requests: list[ReadingRequest], backend: Backend, cache: ResponseCache | None = None,
                 max_in_flight: int = 4, limiter: TokenBucket | None = None,
                 policy: RetryPolicy = RetryPolicy(), sleep: Callable[[float], None] = time.sleep) -> list[ReadOutcome]:
    """Run requests with at most ``max_in_flight`` concurrent calls; results keep input order."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be at least 1")

    def one(req: ReadingRequest) -> ReadOutcome:
        try:
            return ReadOutcome(req, extract_reading(req, backend, cache, policy, sleep, limiter=limiter), None)
        except (ReadingError, UnparseableReading, httpx.HTTPError) as e:
            return ReadOutcome(req, None, str(e))

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, requests))
