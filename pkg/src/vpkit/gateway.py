"""Black-box LVLM access: providers, persistent response cache, retries, batching.

Cache log layout: a sequence of records, each a 4-byte big-endian length
followed by that many bytes of UTF-8 JSON. The first record is the header
``{"format": "vpcache/1"}``. A torn final record (process killed mid-write)
is dropped on load and the file is truncated back to the last whole record
before anything new is appended.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .errors import ConfigError, GatewayError, ProtocolError, ProviderError, VPKitError
from .image import encode_png
from .prompts import PromptedImage

log = logging.getLogger(__name__)

CACHE_FORMAT = "vpcache/1"
DEFAULT_MAX_TOKENS = 512


@dataclass(frozen=True)
class DecodeParams:
    greedy: bool = True
    max_tokens: int = DEFAULT_MAX_TOKENS


@dataclass(frozen=True)
class LvlmRequest:
    model: str
    image: PromptedImage
    text: str
    decode: DecodeParams = DecodeParams()
    # Ground-truth answer for presence questions. Only the mock provider reads
    # it and it is not part of the cache key.
    truth: bool | None = None


@dataclass(frozen=True)
class LvlmResponse:
    text: str
    latency_ms: float
    token_count: int = 0
    from_cache: bool = False

    @property
    def ms_per_token(self) -> float | None:
        return self.latency_ms / self.token_count if self.token_count else None


def _field(h, data: bytes) -> None:
    h.update(struct.pack(">Q", len(data)))
    h.update(data)


def cache_key(req: LvlmRequest) -> bytes:
    """SHA-256 over a length-prefixed serialization of the request identity."""
    h = hashlib.sha256()
    raster = req.image.raster
    _field(h, CACHE_FORMAT.encode())
    _field(h, req.model.encode("utf-8"))
    _field(h, struct.pack(">II", raster.width, raster.height))
    _field(h, raster.tobytes())
    _field(h, req.image.prompt_id.encode("utf-8"))
    _field(h, req.text.encode("utf-8"))
    _field(h, json.dumps(asdict(req.decode), sort_keys=True).encode())
    return h.digest()


class ResponseCache:
    """Append-only response log with an in-memory index.

    Pass ``path=None`` for a purely in-memory cache.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._index: dict[bytes, dict[str, Any]] = {}
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None:
            self._open()

    def _open(self) -> None:
        valid_end = 0
        if self.path.exists():
            data = self.path.read_bytes()
            pos = 0
            first = True
            while pos + 4 <= len(data):
                (n,) = struct.unpack(">I", data[pos : pos + 4])
                if pos + 4 + n > len(data):
                    break
                try:
                    rec = json.loads(data[pos + 4 : pos + 4 + n])
                except ValueError:
                    break
                if first:
                    if rec.get("format") != CACHE_FORMAT:
                        raise ConfigError(f"{self.path}: not a {CACHE_FORMAT} cache log")
                    first = False
                else:
                    self._index[bytes.fromhex(rec["key"])] = rec
                pos += 4 + n
                valid_end = pos
            if valid_end < len(data):
                log.warning("dropping %d bytes of torn cache tail in %s", len(data) - valid_end, self.path)
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "r+b" if self.path.exists() else "w+b")
        self._fh.truncate(valid_end)
        self._fh.seek(valid_end)
        if valid_end == 0:
            self._write({"format": CACHE_FORMAT})

    def _write(self, rec: dict[str, Any]) -> None:
        blob = json.dumps(rec, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self._fh.write(struct.pack(">I", len(blob)) + blob)
        self._fh.flush()

    def get(self, key: bytes) -> dict[str, Any] | None:
        return self._index.get(key)

    def put(self, key: bytes, rec: dict[str, Any]) -> None:
        rec = dict(rec, key=key.hex())
        with self._lock:
            if key in self._index:
                return
            if self._fh is not None:
                self._write(rec)
            self._index[key] = rec

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: bytes) -> bool:
        return key in self._index

    def records(self) -> list[dict[str, Any]]:
        return list(self._index.values())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


# ---------- providers ----------


class Provider(Protocol):
    def complete(self, req: LvlmRequest) -> tuple[str, int]:
        """Return ``(text, output_token_count)``; raise on failure."""


class RetryableError(VPKitError):
    """Transient failure (transport, 429, 5xx) worth another attempt."""


@dataclass
class MockProfile:
    """Per-prompt answer accuracy for the mock LVLM.

    ``image_modifiers`` maps a source-image digest (hex) to additive
    per-prompt adjustments; the result is clamped to [0, 1].
    """

    accuracy: dict[str, float] = field(default_factory=dict)
    default: float = 0.5
    image_modifiers: dict[str, dict[str, float]] = field(default_factory=dict)

    def effective(self, image_digest: bytes, prompt_id: str) -> float:
        acc = self.accuracy.get(prompt_id, self.default)
        acc += self.image_modifiers.get(image_digest.hex(), {}).get(prompt_id, 0.0)
        return min(1.0, max(0.0, acc))

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "MockProfile":
        return cls(
            accuracy={k: float(v) for k, v in doc.get("accuracy", {}).items()},
            default=float(doc.get("default", 0.5)),
            image_modifiers={k: {p: float(x) for p, x in v.items()} for k, v in doc.get("image_modifiers", {}).items()},
        )

    def to_json(self) -> dict[str, Any]:
        return {"accuracy": self.accuracy, "default": self.default, "image_modifiers": self.image_modifiers}


def mock_draw(image_digest: bytes, prompt_id: str, question: str) -> float:
    """Uniform value in [0, 1) from the first 8 bytes of a SHA-256."""
    h = hashlib.sha256(image_digest + prompt_id.encode("utf-8") + question.encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def mock_respond(profile: MockProfile, image_digest: bytes, prompt_id: str, question: str, truth: bool) -> str:
    correct = mock_draw(image_digest, prompt_id, question) < profile.effective(image_digest, prompt_id)
    return "Yes" if correct == bool(truth) else "No"


class MockProvider:
    """Deterministic stand-in for an LVLM, counting every call it serves."""

    def __init__(self, profile: MockProfile, description: str = "A photo."):
        self.profile = profile
        self.description = description
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, req: LvlmRequest) -> tuple[str, int]:
        with self._lock:
            self.calls += 1
        if req.truth is None:
            text = self.description
        else:
            text = mock_respond(self.profile, req.image.source_digest, req.image.prompt_id, req.text, req.truth)
        return text, 1


def _png_b64(req: LvlmRequest) -> str:
    return base64.b64encode(encode_png(req.image.raster)).decode("ascii")


class _HttpProvider:
    api_key_env = ""

    def __init__(self, model: str, base_url: str, api_key_env: str | None = None,
                 client: httpx.Client | None = None, timeout: float = 120.0):
        self.model = model
        self.base_url = base_url.rstrip("/")
        if api_key_env:
            self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)
        self.calls = 0

    def _api_key(self) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set")
        return key

    def _post(self, url: str, headers: dict[str, str], body: dict[str, Any]) -> dict[str, Any]:
        self.calls += 1
        try:
            resp = self._client.post(url, headers=headers, json=body)
        except httpx.TransportError as exc:
            raise RetryableError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableError(f"provider returned {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"provider rejected request ({resp.status_code}): {resp.text[:200]}", resp.status_code)
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError("provider response is not JSON") from exc


class ChatCompletionsProvider(_HttpProvider):
    """Chat-completions style API (``/chat/completions`` with image_url parts)."""

    api_key_env = "OPENAI_API_KEY"

    def __init__(self, model: str, base_url: str = "https://api.openai.com/v1", **kw):
        super().__init__(model, base_url, **kw)

    def complete(self, req: LvlmRequest) -> tuple[str, int]:
        body: dict[str, Any] = {
            "model": self.model,
            "max_tokens": req.decode.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": "data:image/png;base64," + _png_b64(req)}},
                    {"type": "text", "text": req.text},
                ],
            }],
        }
        if req.decode.greedy:
            body["temperature"] = 0
        doc = self._post(f"{self.base_url}/chat/completions", {"Authorization": f"Bearer {self._api_key()}"}, body)
        try:
            text = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected chat-completions payload: {str(doc)[:200]}") from exc
        tokens = int((doc.get("usage") or {}).get("completion_tokens") or 0)
        return text, tokens


class MessagesProvider(_HttpProvider):
    """Messages style API (``/v1/messages`` with base64 image blocks)."""

    api_key_env = "ANTHROPIC_API_KEY"

    def __init__(self, model: str, base_url: str = "https://api.anthropic.com", **kw):
        super().__init__(model, base_url, **kw)

    def complete(self, req: LvlmRequest) -> tuple[str, int]:
        body: dict[str, Any] = {
            "model": self.model,
            "max_tokens": req.decode.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image", "source": {"type": "base64", "media_type": "image/png", "data": _png_b64(req)}},
                    {"type": "text", "text": req.text},
                ],
            }],
        }
        if req.decode.greedy:
            body["temperature"] = 0
        headers = {"x-api-key": self._api_key(), "anthropic-version": "2023-06-01"}
        doc = self._post(f"{self.base_url}/v1/messages", headers, body)
        try:
            text = "".join(block["text"] for block in doc["content"] if block.get("type") == "text")
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"unexpected messages payload: {str(doc)[:200]}") from exc
        tokens = int((doc.get("usage") or {}).get("output_tokens") or 0)
        return text, tokens


# ---------- gateway ----------


class Gateway:
    """Cache-aware, rate-limited front door to one or more providers.

    Args:
        providers: model ref -> provider.
        cache: response cache; an in-memory one is created when omitted.
        retries: extra attempts after a transient failure.
        backoff: base delay in seconds; attempt k waits U(0, backoff * 2**k).
        max_in_flight: cap on concurrent provider calls across all threads.
        allow_sampling: permit non-greedy requests.
    """

    def __init__(
        self,
        providers: Mapping[str, Provider],
        cache: ResponseCache | None = None,
        retries: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        allow_sampling: bool = False,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int | None = None,
    ):
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.providers = dict(providers)
        self.cache = cache if cache is not None else ResponseCache()
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self.allow_sampling = allow_sampling
        self._sleep = sleep
        self._rng = random.Random(jitter_seed)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.provider_calls = 0
        self._count_lock = threading.Lock()

    def _provider(self, model: str) -> Provider:
        try:
            return self.providers[model]
        except KeyError:
            raise ConfigError(f"no provider configured for model {model!r}") from None

    def cached(self, req: LvlmRequest) -> LvlmResponse | None:
        rec = self.cache.get(cache_key(req))
        if rec is None:
            return None
        r = rec["response"]
        return LvlmResponse(r["text"], float(r["latency_ms"]), int(r["token_count"]), from_cache=True)

    def query(self, req: LvlmRequest) -> LvlmResponse:
        if not req.decode.greedy and not self.allow_sampling:
            raise ConfigError("non-greedy decoding requires allow_sampling=True")
        provider = self._provider(req.model)
        key = cache_key(req)
        hit = self.cached(req)
        if hit is not None:
            return hit

        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with self._slots:
                    with self._count_lock:
                        self.provider_calls += 1
                    t0 = time.perf_counter()
                    text, tokens = provider.complete(req)
                    latency = (time.perf_counter() - t0) * 1000.0
                break
            except RetryableError as exc:
                last = exc
                if attempt < self.retries:
                    delay = self._rng.uniform(0, self.backoff * 2**attempt)
                    log.info("retrying %s in %.2fs after: %s", req.model, delay, exc)
                    self._sleep(delay)
        else:
            raise GatewayError(f"{req.model}: giving up after {self.retries + 1} attempts: {last}") from last

        self.cache.put(key, {
            "model": req.model,
            "prompt_id": req.image.prompt_id,
            "source_digest": req.image.source_digest.hex(),
            "text": req.text,
            "decode": asdict(req.decode),
            "response": {"text": text, "latency_ms": latency, "token_count": tokens},
        })
        return LvlmResponse(text, latency, tokens, from_cache=False)

    def batch_collect(self, reqs: Sequence[LvlmRequest], max_in_flight: int | None = None) -> list[LvlmResponse | VPKitError]:
        """Run many requests; results keep request order.

        A failed item yields its exception in that slot instead of aborting.
        """
        limit = self.max_in_flight if max_in_flight is None else max_in_flight
        if limit < 1:
            raise ConfigError("max_in_flight must be >= 1")
        results: list[LvlmResponse | VPKitError | None] = [None] * len(reqs)
        pending = []
        for i, req in enumerate(reqs):
            try:
                hit = self.cached(req)
            except VPKitError as exc:
                results[i] = exc
                continue
            if hit is not None:
                results[i] = hit
            else:
                pending.append(i)

        def run(i: int) -> LvlmResponse | VPKitError:
            try:
                return self.query(reqs[i])
            except VPKitError as exc:
                return exc

        if pending:
            with ThreadPoolExecutor(max_workers=min(limit, len(pending))) as pool:
                for i, res in zip(pending, pool.map(run, pending)):
                    results[i] = res
        return results  # type: ignore[return-value]
