"""One client for every model role: chat completions and embeddings behind a
content-addressed cache, so any pipeline run can be replayed offline."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import httpx

Message = tuple[str, str]  # (speaker, text)


@dataclass(frozen=True)
class ChatRequest:
    role_name: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    top_p: float = 1.0
    top_k: int = 0  # 0 means disabled
    max_tokens: int = 2048
    n_samples: int = 1

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.messages:
            raise ValueError("messages must be non-empty")


@dataclass(frozen=True)
class EmbedRequest:
    role_name: str
    text: str
    dim: int

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


def chat_payload(req: ChatRequest, sample_index: int) -> dict[str, Any]:
    """Canonical request payload; both the cache key and the stored entry use it."""
    return {
        "kind": "chat",
        "role_name": req.role_name,
        "messages": [[speaker, text] for speaker, text in req.messages],
        "temperature": req.temperature,
        "top_p": req.top_p,
        "top_k": req.top_k,
        "max_tokens": req.max_tokens,
        "sample_index": sample_index,
    }


def embed_payload(req: EmbedRequest) -> dict[str, Any]:
    return {"kind": "embed", "role_name": req.role_name, "text": req.text, "dim": req.dim}


def _digest(payload: dict[str, Any]) -> str:
    canon = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def chat_key(req: ChatRequest, sample_index: int) -> str:
    """Cache key for one sample. n_samples can grow without invalidating old ones."""
    return _digest(chat_payload(req, sample_index))


def embed_key(req: EmbedRequest) -> str:
    return _digest(embed_payload(req))


class ClientError(RuntimeError):
    pass


class ReplayMiss(ClientError):
    """Replay mode hit a request that is not in the store."""

    def __init__(self, key: str, role_name: str):
        super().__init__(f"replay miss for role {role_name!r}: no cache entry {key}")
        self.key = key
        self.role_name = role_name


class EndpointError(ClientError):
    """The endpoint failed after retries or returned a malformed response."""


class DimensionMismatch(ClientError):
    """An embedding endpoint returned a vector of the wrong length."""


@dataclass(frozen=True)
class Endpoint:
    url: str
    model: str
    api_key_env: str | None = None


# Sampling presets per model role. These feed the cache keys, so replay stores
# and live runs must agree on them; keep them in this one table.
ROLE_PRESETS: dict[str, dict[str, Any]] = {
    "domain-classifier": {"temperature": 0.0, "top_p": 1.0, "top_k": 0, "max_tokens": 64},
    "problem-validator": {"temperature": 0.0, "top_p": 1.0, "top_k": 0, "max_tokens": 64},
    "answer-extractor": {"temperature": 0.0, "top_p": 1.0, "top_k": 0, "max_tokens": 512},
    "difficulty-scorer": {"temperature": 0.0, "top_p": 1.0, "top_k": 0, "max_tokens": 64},
    "stage1-solver": {"temperature": 0.7, "top_p": 0.8, "top_k": 20, "max_tokens": 2048},
    "stage2-solver": {"temperature": 0.6, "top_p": 0.95, "top_k": 20, "max_tokens": 8192},
    "teacher": {"temperature": 0.6, "top_p": 0.95, "top_k": 20, "max_tokens": 16384},
    "verifier": {"temperature": 0.0, "top_p": 1.0, "top_k": 0, "max_tokens": 32},
}


def request_for_role(role_name: str, messages: Sequence[Message], n_samples: int = 1) -> ChatRequest:
    preset = ROLE_PRESETS.get(role_name, {})
    return ChatRequest(role_name=role_name, messages=tuple(messages), n_samples=n_samples, **preset)


def sampler_params_digest(req: ChatRequest) -> str:
    """Short digest of the sampling configuration, for response provenance."""
    payload = {
        "role_name": req.role_name,
        "temperature": req.temperature,
        "top_p": req.top_p,
        "top_k": req.top_k,
        "max_tokens": req.max_tokens,
    }
    return _digest(payload)[:12]


def store_entry(store_dir: str | Path, key: str, request: dict[str, Any], response: Any) -> Path:
    """Write one cache entry atomically (temp file + rename)."""
    store_dir = Path(store_dir)
    store_dir.mkdir(parents=True, exist_ok=True)
    path = store_dir / f"{key}.json"
    entry = {
        "key": key,
        "request": request,
        "response": response,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(entry, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_entry(store_dir: str | Path, key: str) -> dict[str, Any] | None:
    path = Path(store_dir) / f"{key}.json"
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def seed_completion(store_dir: str | Path, req: ChatRequest, texts: Sequence[str]) -> list[str]:
    """Preload a replay store with responses for req's first len(texts) samples."""
    keys = []
    for i, text in enumerate(texts):
        key = chat_key(req, i)
        store_entry(store_dir, key, chat_payload(req, i), text)
        keys.append(key)
    return keys


def seed_embedding(store_dir: str | Path, req: EmbedRequest, vector: Sequence[float]) -> str:
    if len(vector) != req.dim:
        raise DimensionMismatch(f"seed vector has {len(vector)} dims, request says {req.dim}")
    key = embed_key(req)
    store_entry(store_dir, key, embed_payload(req), list(vector))
    return key


class _TokenBucket:
    """Simple token bucket: capacity == refill rate (requests per second)."""

    def __init__(self, rate: float):
        self.rate = rate
        self.tokens = rate
        self.updated = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.rate, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class ModelClient:
    """Cached chat/embedding client.

    Lookup order is replay_dir then cache_dir; misses go to the configured
    endpoint for the role (live mode) or raise ReplayMiss when the role has no
    endpoint. Live responses are cached per sample under a content-addressed
    key, so identical requests never hit the network twice.
    """

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        replay_dir: str | Path | None = None,
        endpoints: dict[str, Endpoint] | None = None,
        rate_limits: dict[str, float] | None = None,
        transport: httpx.BaseTransport | None = None,
        max_retries: int = 3,
        backoff_s: float = 0.25,
        timeout_s: float = 120.0,
    ):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.replay_dir = Path(replay_dir) if replay_dir else None
        self.endpoints = dict(endpoints or {})
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.network_calls = 0
        self._buckets = {role: _TokenBucket(rate) for role, rate in (rate_limits or {}).items()}
        self._http = httpx.Client(transport=transport, timeout=timeout_s)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    # --- public API ---

    def complete(self, req: ChatRequest) -> list[str]:
        """Return exactly req.n_samples completion texts, one per sample index."""
        return [self._one_sample(req, i) for i in range(req.n_samples)]

    def embed(self, req: EmbedRequest) -> list[float]:
        key = embed_key(req)
        hit = self._lookup(key)
        if hit is not None:
            vector = hit["response"]
        else:
            with self._key_lock(key):
                hit = self._lookup(key)
                if hit is not None:
                    vector = hit["response"]
                else:
                    endpoint = self.endpoints.get(req.role_name)
                    if endpoint is None:
                        raise ReplayMiss(key, req.role_name)
                    vector = self._post_embed(endpoint, req)
                    self._cache(key, embed_payload(req), vector)
        if len(vector) != req.dim:
            raise DimensionMismatch(
                f"role {req.role_name!r} returned {len(vector)} dims, expected {req.dim}"
            )
        return [float(x) for x in vector]

    def close(self) -> None:
        self._http.close()

    # --- internals ---

    def _one_sample(self, req: ChatRequest, sample_index: int) -> str:
        key = chat_key(req, sample_index)
        hit = self._lookup(key)
        if hit is not None:
            return hit["response"]
        with self._key_lock(key):
            hit = self._lookup(key)  # another thread may have fetched it
            if hit is not None:
                return hit["response"]
            endpoint = self.endpoints.get(req.role_name)
            if endpoint is None:
                raise ReplayMiss(key, req.role_name)
            text = self._post_chat(endpoint, req)
            self._cache(key, chat_payload(req, sample_index), text)
            return text

    def _key_lock(self, key: str) -> threading.Lock:
        with self._guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def _lookup(self, key: str) -> dict[str, Any] | None:
        for store in (self.replay_dir, self.cache_dir):
            if store is not None:
                entry = load_entry(store, key)
                if entry is not None:
                    return entry
        return None

    def _cache(self, key: str, request: dict[str, Any], response: Any) -> None:
        if self.cache_dir is not None:
            store_entry(self.cache_dir, key, request, response)

    def _headers(self, endpoint: Endpoint) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, role_name: str, url: str, payload: dict[str, Any], headers: dict[str, str]) -> dict[str, Any]:
        bucket = self._buckets.get(role_name)
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if bucket is not None:
                bucket.acquire()
            try:
                self.network_calls += 1
                resp = self._http.post(url, json=payload, headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.TransportError(f"retryable status {resp.status_code}")
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last_exc = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff_s * (2**attempt))
            except httpx.HTTPStatusError as exc:
                raise EndpointError(f"endpoint error from {url}: {exc}") from exc
        raise EndpointError(f"endpoint {url} failed after {self.max_retries + 1} attempts: {last_exc}")

    def _post_chat(self, endpoint: Endpoint, req: ChatRequest) -> str:
        payload: dict[str, Any] = {
            "model": endpoint.model,
            "messages": [{"role": speaker, "content": text} for speaker, text in req.messages],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
            "n": 1,
        }
        if req.top_k > 0:
            payload["top_k"] = req.top_k
        url = endpoint.url.rstrip("/") + "/chat/completions"
        data = self._post(req.role_name, url, payload, self._headers(endpoint))
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed chat response from {url}: {exc}") from exc

    def _post_embed(self, endpoint: Endpoint, req: EmbedRequest) -> list[float]:
        payload = {"model": endpoint.model, "input": req.text}
        url = endpoint.url.rstrip("/") + "/embeddings"
        data = self._post(req.role_name, url, payload, self._headers(endpoint))
        try:
            return data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed embedding response from {url}: {exc}") from exc
