"""VLM gateway, captionability verdicts and caption parsing.

Two gateways are provided: :class:`OpenAIGateway` talks to any
OpenAI-compatible ``/v1/chat/completions`` endpoint, :class:`StubGateway`
replays scripted responses keyed by image id (tests, offline runs).

Policy (not prescribed by the prompts themselves): temperature 0, transport
errors retried with exponential backoff, unparseable answers retried
immediately and then treated as a rejection.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import httpx
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

DEFAULT_MODEL = "Qwen3-VL-8B-Instruct"
API_KEY_ENV = "BLENDFORGE_VLM_API_KEY"
CAPTION_MIN_WORDS = 8
CAPTION_MAX_WORDS = 20

_VERDICT_RE = re.compile(r"^(GOOD|BAD):\s*(.*)$", re.DOTALL)
_QUOTE_PAIRS = {'"': '"', "'": "'", "“": "”", "`": "`"}


def _load_prompt(name: str) -> str:
    return resources.files("blendforge").joinpath("data", "prompts", name).read_text(encoding="utf-8")


# The filtering prompt is shipped verbatim, including the
# truncated "BAD if >30" line.
FILTER_PROMPT = _load_prompt("filter.txt")
CAPTION_PROMPT = _load_prompt("caption.txt")


class GatewayError(RuntimeError):
    """Transport or HTTP failure that survived all retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class UnparseableVerdict(ValueError):
    pass


class UnparseableCaption(ValueError):
    pass


@dataclass(frozen=True)
class VlmRequest:
    prompt: str
    image: bytes  # PNG payload
    image_id: str = ""
    model_name: str = DEFAULT_MODEL
    max_tokens: int = 128
    temperature: float = 0.0
    task: str = "filter"  # "filter" or "caption"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str


@dataclass(frozen=True)
class Caption:
    text: str
    word_count: int
    length_warning: bool


class VlmGateway(Protocol):
    def complete(self, request: VlmRequest) -> str: ...


# -- parsing --------------------------------------------------------------------


def _is_multiline(text: str) -> bool:
    return len(text.splitlines()) > 1


def _strip_wrapping(raw: str) -> str:
    text = raw.strip()
    while len(text) >= 2 and _QUOTE_PAIRS.get(text[0]) == text[-1]:
        text = text[1:-1].strip()
    return text


def parse_verdict(raw: Any) -> Verdict:
    """Parse ``GOOD: <reason>`` / ``BAD: <reason>``; raise UnparseableVerdict otherwise."""
    if not isinstance(raw, str):
        raise UnparseableVerdict(f"expected text, got {type(raw).__name__}")
    text = _strip_wrapping(raw)
    if _is_multiline(text):
        raise UnparseableVerdict("verdict spans multiple lines")
    m = _VERDICT_RE.match(text)
    if m is None:
        raise UnparseableVerdict(f"missing GOOD:/BAD: prefix in {text[:60]!r}")
    reason = m.group(2).strip()
    if not reason:
        raise UnparseableVerdict("empty reason")
    return Verdict(accepted=m.group(1) == "GOOD", reason=reason)


def format_verdict(verdict: Verdict) -> str:
    return f"{'GOOD' if verdict.accepted else 'BAD'}: {verdict.reason}"


def parse_caption(raw: Any) -> Caption:
    if not isinstance(raw, str):
        raise UnparseableCaption(f"expected text, got {type(raw).__name__}")
    text = _strip_wrapping(raw)
    if not text:
        raise UnparseableCaption("empty caption")
    if _is_multiline(text):
        raise UnparseableCaption("caption spans multiple lines")
    n = len(text.split())
    return Caption(text=text, word_count=n, length_warning=not CAPTION_MIN_WORDS <= n <= CAPTION_MAX_WORDS)


# -- image payload ------------------------------------------------------------------


def encode_png(image: np.ndarray | bytes) -> bytes:
    if isinstance(image, (bytes, bytearray)):
        return bytes(image)
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def data_uri(png: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png).decode("ascii")


# -- operations -----------------------------------------------------------------


def filter_image(
    gateway: VlmGateway,
    image: np.ndarray | bytes,
    prompt: str = FILTER_PROMPT,
    retries: int = 2,
    image_id: str = "",
    model_name: str = DEFAULT_MODEL,
    temperature: float = 0.0,
) -> Verdict:
    """Ask the gateway for a GOOD/BAD verdict.

    Unparseable answers are retried ``retries`` more times, then mapped to a
    rejection with reason ``"unparseable"``. GatewayError propagates.
    """
    req = VlmRequest(prompt, encode_png(image), image_id, model_name, 64, temperature, "filter")
    for attempt in range(retries + 1):
        raw = gateway.complete(req)
        try:
            return parse_verdict(raw)
        except UnparseableVerdict as exc:
            log.debug("%s: unparseable verdict (attempt %d): %s", image_id, attempt + 1, exc)
    return Verdict(accepted=False, reason="unparseable")


def caption_image(
    gateway: VlmGateway,
    image: np.ndarray | bytes,
    prompt: str = CAPTION_PROMPT,
    retries: int = 2,
    image_id: str = "",
    model_name: str = DEFAULT_MODEL,
    temperature: float = 0.0,
) -> Caption:
    req = VlmRequest(prompt, encode_png(image), image_id, model_name, 96, temperature, "caption")
    last: UnparseableCaption | None = None
    for _ in range(retries + 1):
        try:
            return parse_caption(gateway.complete(req))
        except UnparseableCaption as exc:
            last = exc
    raise UnparseableCaption(f"{image_id}: no usable caption after {retries + 1} attempts ({last})")


def map_bounded(fn: Callable[[Any], Any], items: Iterable[Any], max_in_flight: int = 8) -> list[Any]:
    """Apply ``fn`` with at most ``max_in_flight`` concurrent calls; results keep input order.

    Exceptions are returned in place of results so one failing record does
    not abort the batch.
    """
    items = list(items)

    def safe(item):
        try:
            return fn(item)
        except Exception as exc:  # noqa: BLE001 - surfaced to the caller per item
            return exc

    if max_in_flight <= 1:
        return [safe(it) for it in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(safe, items))


# -- gateways -------------------------------------------------------------------


class OpenAIGateway:
    """Client for an OpenAI-compatible chat-completions endpoint."""

    def __init__(
        self,
        endpoint: str,
        model_name: str = DEFAULT_MODEL,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/v1/chat/completions" if not self.url.endswith("/v1") else "/chat/completions"
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self._jitter = random.Random(seed)

    def payload(self, request: VlmRequest) -> dict:
        return {
            "model": request.model_name or self.model_name,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.prompt},
                        {"type": "image_url", "image_url": {"url": data_uri(request.image)}},
                    ],
                }
            ],
        }

    def _backoff(self, attempt: int) -> float:
        delay = self.backoff_base * self.backoff_factor ** attempt
        return delay * (0.5 + self._jitter.random())

    def complete(self, request: VlmRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(request)
        last_status: int | None = None
        last_msg = ""
        with self._slots:
            for attempt in range(self.max_retries + 1):
                if attempt:
                    self._sleep(self._backoff(attempt - 1))
                try:
                    resp = self._client.post(self.url, json=body, headers=headers)
                except httpx.HTTPError as exc:
                    last_status, last_msg = None, str(exc)
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_status, last_msg = resp.status_code, resp.text[:200]
                    continue
                if resp.status_code >= 400:
                    raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
                return _message_text(resp.json())
        raise GatewayError(
            f"request for {request.image_id or 'image'} failed after {self.max_retries + 1} attempts: "
            f"{last_status or ''} {last_msg}".strip(),
            last_status,
        )


def _message_text(data: dict) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GatewayError(f"malformed completion response: {json.dumps(data)[:200]}") from exc
    if isinstance(content, list):
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    return content if isinstance(content, str) else ""


@dataclass
class StubGateway:
    """Scripted gateway for tests and offline runs.

    ``responses`` holds filter answers and ``captions`` caption answers,
    each mapping image id to a string or to a list consumed one per call
    (the last entry repeats). An entry ``{"error": 500}`` raises
    GatewayError. Unscripted ids fall back to ``rule(request)``, then to
    ``default`` / ``default_caption``. Peak concurrency is kept in
    ``max_seen``.
    """

    responses: dict = field(default_factory=dict)
    captions: dict = field(default_factory=dict)
    default: str | None = None
    default_caption: str | None = None
    rule: Callable[[VlmRequest], Any] | None = None
    delay: float = 0.0
    calls: list = field(default_factory=list)
    max_seen: int = 0
    _in_flight: int = 0
    _cursor: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "StubGateway":
        """Accepts ``{"filter": {...}, "caption": {...}, "default": {"filter": s, "caption": s}}``.

        A bare ``{id: response}`` mapping is read as filter responses.
        """
        if "filter" in data or "caption" in data:
            default = data.get("default") or {}
            if isinstance(default, str):
                default = {"filter": default}
            return cls(
                responses=data.get("filter", {}),
                captions=data.get("caption", {}),
                default=default.get("filter"),
                default_caption=default.get("caption"),
            )
        return cls(responses=data)

    @classmethod
    def from_file(cls, path: str | Path) -> "StubGateway":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def _next(self, request: VlmRequest) -> Any:
        key = request.image_id
        table = self.captions if request.task == "caption" else self.responses
        entry = table.get(key)
        if isinstance(entry, list):
            ckey = (request.task, key)
            i = self._cursor.get(ckey, 0)
            self._cursor[ckey] = i + 1
            return entry[min(i, len(entry) - 1)]
        if entry is not None:
            return entry
        if self.rule is not None:
            return self.rule(request)
        fallback = self.default_caption if request.task == "caption" else self.default
        if fallback is not None:
            return fallback
        raise GatewayError(f"stub has no {request.task} response for {key!r}", 404)

    def complete(self, request: VlmRequest) -> str:
        with self._lock:
            self._in_flight += 1
            self.max_seen = max(self.max_seen, self._in_flight)
            self.calls.append(request.image_id)
            entry = self._next(request)
        try:
            if self.delay:
                time.sleep(self.delay)
            if isinstance(entry, dict) and "error" in entry:
                raise GatewayError(f"stub HTTP {entry['error']}", int(entry["error"]))
            return entry
        finally:
            with self._lock:
                self._in_flight -= 1
