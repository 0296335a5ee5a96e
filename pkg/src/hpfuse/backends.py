"""Answer and embedding backends.

Two pluggable surfaces: an answer backend (one image + one question per
request) and a text-embedding backend. Each comes in a stub flavor for
offline/deterministic runs and an HTTP flavor speaking
chat-completions/embeddings-compatible JSON. Both stubs count calls so
cache behavior is observable in tests.
"""

from __future__ import annotations

import base64
import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
import requests

API_KEY_ENV = "HPFUSE_API_KEY"
BASE_URL_ENV = "HPFUSE_BACKEND_URL"


class TransportError(RuntimeError):
    """Network-level backend failure (timeout, connection, HTTP error); retryable."""


class ProtocolError(RuntimeError):
    """The backend answered, but with malformed or unusable content."""


def derived_rng(*parts) -> np.random.Generator:
    """Generator seeded from a stable hash of the given parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))


_REGIONS = ("upper left", "upper right", "lower left", "lower right", "central",
            "left edge", "right edge", "foreground", "background")
_WARM_SUBJECTS = ("a warm silhouette", "a bright lamp", "an engine block", "a sunlit wall",
                  "a heated window", "a walking figure")
_TEXTURES = ("signage and lettering", "foliage", "brickwork", "fence slats",
             "window frames", "road markings")
_TARGETS = ("two pedestrians", "a parked car", "a cyclist", "a utility pole",
            "a doorway", "a dog near the curb", "an approaching vehicle")
_SCENES = ("a street at dusk", "a courtyard", "an intersection", "a parking lot",
           "a riverside path", "a building entrance")
_ELEMENTS = ("buildings on both sides", "scattered vehicles", "trees lining the road",
             "a low wall in front", "overhead cables", "distant hills")


class StubAnswerBackend:
    """Deterministic pseudo-answers derived from (seed, image hash, question id)."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.calls = 0

    @property
    def backend_id(self) -> str:
        return f"stub-answers-v1-s{self.seed}"

    def answer(self, image_bytes: bytes, image_hash: str, question) -> str:
        self.calls += 1
        rng = derived_rng("stub-answer", self.seed, image_hash, question.qid)

        def pick(pool):
            return pool[int(rng.integers(len(pool)))]

        if question.qid == 1:
            return (f"The {pick(_REGIONS)} region shows the strongest contrast, "
                    f"where {pick(_WARM_SUBJECTS)} stands out sharply.")
        if question.qid == 2:
            return (f"Fine detail is concentrated in the {pick(_REGIONS)} area, "
                    f"especially around {pick(_TEXTURES)}.")
        if question.qid == 3:
            return f"The most noticeable targets are {pick(_TARGETS)} and {pick(_TARGETS)}."
        return f"The image shows {pick(_SCENES)} with {pick(_ELEMENTS)}."


class StubEmbeddingBackend:
    """Deterministic unit-norm pseudo-embeddings keyed by text content."""

    def __init__(self, seed: int = 0, dim: int = 512):
        self.seed = seed
        self.dim = dim
        self.calls = 0

    @property
    def backend_id(self) -> str:
        return f"stub-embed-v1-s{self.seed}-d{self.dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += len(texts)
        rows = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            v = derived_rng("stub-embed", self.seed, text).standard_normal(self.dim)
            rows[i] = v / np.linalg.norm(v)
        return rows


class _HttpClient:
    def __init__(self, base_url: str | None, api_key: str | None, timeout: float,
                 max_retries: int, retry_delay: float, session=None):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        if not self.base_url:
            raise ValueError(f"no backend base URL configured (set {BASE_URL_ENV} or pass base_url)")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self.session = session or requests.Session()

    def post_json(self, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = self.base_url + path
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.retry_delay * (2 ** (attempt - 1)))
            try:
                resp = self.session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 400:
                last_error = TransportError(f"HTTP {resp.status_code} from {url}")
                continue
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {url}: {exc}") from exc
        raise TransportError(f"POST {url} failed after {self.max_retries + 1} attempts: {last_error}")


class HttpAnswerBackend:
    """Chat-completions-style client: one question plus one image per request."""

    def __init__(self, base_url: str | None = None, model: str = "default",
                 api_key: str | None = None, timeout: float = 60.0,
                 max_retries: int = 3, retry_delay: float = 0.5,
                 max_concurrency: int = 4, session=None):
        self._client = _HttpClient(base_url, api_key, timeout, max_retries, retry_delay, session)
        self.model = model
        self.max_concurrency = max_concurrency

    @property
    def backend_id(self) -> str:
        return f"http-answers-{self.model}"

    def answer(self, image_bytes: bytes, image_hash: str, question) -> str:
        encoded = base64.b64encode(image_bytes).decode("ascii")
        payload = {
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": question.text},
                    {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}},
                ],
            }],
        }
        data = self._client.post_json("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat-completions response: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise ProtocolError("chat-completions response has no answer text")
        return text.strip()

    def answer_many(self, items: Sequence[tuple[bytes, str, object]]) -> list[str]:
        """Answer several (image_bytes, image_hash, question) requests,
        preserving order, with bounded concurrency."""
        if len(items) <= 1 or self.max_concurrency <= 1:
            return [self.answer(*item) for item in items]
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            return list(pool.map(lambda it: self.answer(*it), items))


class HttpEmbeddingBackend:
    """Embeddings-style client: list of strings in, list of vectors out."""

    def __init__(self, base_url: str | None = None, model: str = "default",
                 dim: int = 512, api_key: str | None = None, timeout: float = 60.0,
                 max_retries: int = 3, retry_delay: float = 0.5, session=None):
        self._client = _HttpClient(base_url, api_key, timeout, max_retries, retry_delay, session)
        self.model = model
        self.dim = dim

    @property
    def backend_id(self) -> str:
        return f"http-embed-{self.model}-d{self.dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        data = self._client.post_json("/embeddings", {"model": self.model, "input": list(texts)})
        try:
            vectors = [entry["embedding"] for entry in data["data"]]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embeddings response: {exc}") from exc
        if len(vectors) != len(texts):
            raise ProtocolError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ProtocolError(f"embedding dimension {arr.shape} does not match configured d={self.dim}")
        return arr
