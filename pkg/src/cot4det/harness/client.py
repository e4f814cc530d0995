"""Minimal chat-completions client with retries and bounded concurrency."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from ..errors import AuthError, ResponseShapeError, TransportError

logger = logging.getLogger(__name__)

API_KEY_ENV = "COT4DET_API_KEY"
ENDPOINT_ENV = "COT4DET_ENDPOINT"
RETRY_STATUS = frozenset({408, 429, 500, 502, 503, 504})
AUTH_STATUS = frozenset({401, 403})


@dataclass(frozen=True)
class InferenceRequest:
    image: str
    prompt: str
    max_tokens: int = 8192
    temperature: float = 0.0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


def image_url(ref: str) -> str:
    """Pass URLs through; turn local paths into ``file://`` URIs."""
    if "://" in ref or ref.startswith("data:"):
        return ref
    return Path(ref).resolve().as_uri()


def build_payload(model: str, req: InferenceRequest) -> dict:
    return {
        "model": model,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": image_url(req.image)}},
                    {"type": "text", "text": req.prompt},
                ],
            }
        ],
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    }


def extract_content(body) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ResponseShapeError("response has no choices[0].message.content") from None
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        parts = [p.get("text") for p in content if isinstance(p, dict) and isinstance(p.get("text"), str)]
        if parts:
            return "".join(parts)
    raise ResponseShapeError(f"unsupported assistant content of type {type(content).__name__}")


class ChatClient:
    """Thread-safe client; at most ``concurrency`` requests are in flight at once.

    Transport failures and 408/429/5xx responses are retried with
    exponential backoff (``backoff * 2**attempt`` seconds, capped at
    ``max_backoff``, or the server's ``Retry-After`` when given).
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        api_key: str | None = None,
        retries: int = 4,
        concurrency: int = 8,
        backoff: float = 0.5,
        max_backoff: float = 30.0,
        timeout: float = 300.0,
        sleep=time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        if concurrency < 1:
            raise ValueError("concurrency must be at least 1")
        if retries < 0:
            raise ValueError("retries must be non-negative")
        self.endpoint = endpoint
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(concurrency)
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.backoff_log: list[float] = []
        self.calls = 0

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        if response is not None:
            after = response.headers.get("retry-after")
            if after:
                try:
                    return min(float(after), self.max_backoff)
                except ValueError:
                    pass
        return min(self.backoff * 2**attempt, self.max_backoff)

    def complete(self, req: InferenceRequest) -> str:
        payload = build_payload(self.model, req)
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            response = None
            with self._slots:
                self.calls += 1
                try:
                    response = self._http.post(self.endpoint, json=payload)
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
            if response is not None:
                if response.status_code in AUTH_STATUS:
                    raise AuthError(f"{self.endpoint} rejected credentials ({response.status_code})")
                if response.status_code < 400:
                    try:
                        body = response.json()
                    except ValueError:
                        raise ResponseShapeError("response body is not JSON") from None
                    return extract_content(body)
                last = f"HTTP {response.status_code}"
                if response.status_code not in RETRY_STATUS:
                    raise TransportError(f"{self.endpoint}: {last}: {response.text[:200]}")
            if attempt == self.retries:
                break
            delay = self._delay(attempt, response)
            self.backoff_log.append(delay)
            logger.warning("%s: %s, retry %d/%d in %.2fs", self.endpoint, last, attempt + 1, self.retries, delay)
            self._sleep(delay)
        raise TransportError(f"{self.endpoint}: giving up after {self.retries + 1} attempts ({last})")


def chat_complete(
    endpoint: str,
    model: str,
    req: InferenceRequest,
    retries: int = 4,
    concurrency: int = 8,
    **kwargs,
) -> str:
    """One-shot request; share a :class:`ChatClient` to bound concurrency across a corpus."""
    with ChatClient(endpoint, model, retries=retries, concurrency=concurrency, **kwargs) as client:
        return client.complete(req)
