"""Sending prompts to a vision-language model backend.

Queries are split into a fixed number of contiguous batches. Each query is
an independent request with exponential-backoff retries. Two backends exist:
a deterministic local mock and a remote HTTP adapter.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import httpx

from .imaging import RasterImage, lit_aspect_ratio
from .prompting import CLASS_LABELS, ClassLabel, ImagePart, Prompt, TextPart, normalize_label, predict

logger = logging.getLogger(__name__)

API_KEY_ENV = "VLM_API_KEY"


class BackendError(RuntimeError):
    """Request failed; ``transient`` errors are retried."""

    def __init__(self, message: str, transient: bool = True):
        super().__init__(message)
        self.transient = transient


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueryBatch:
    index: int
    items: tuple  # (query id, Prompt)

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class ClassificationResult:
    query_id: str
    raw_text: str
    label: ClassLabel | None
    latency: float
    attempts: int
    error: str = ""

    def record(self) -> dict:
        return {
            "id": self.query_id,
            "label": self.label.value if self.label else None,
            "raw_text": self.raw_text,
            "latency": round(self.latency, 6),
            "attempts": self.attempts,
            "error": self.error,
        }


def make_batches(queries, batch_count: int = 5) -> list[QueryBatch]:
    """Contiguous near-equal split; larger batches first, empty ones dropped."""
    queries = list(queries)
    if batch_count < 1:
        raise ValueError("batch_count must be >= 1")
    if not queries:
        raise ValueError("no queries to batch")
    n = len(queries)
    b = min(batch_count, n)
    base, extra = divmod(n, b)
    out, start = [], 0
    for i in range(b):
        size = base + (1 if i < extra else 0)
        out.append(QueryBatch(i, tuple(queries[start:start + size])))
        start += size
    return out


# --- retry -------------------------------------------------------------------

@dataclass(frozen=True)
class RetryPolicy:
    base_delay: float = 1.0
    factor: float = 2.0
    max_retries: int = 3
    sleep: Callable[[float], None] = time.sleep

    @property
    def max_attempts(self) -> int:
        return self.max_retries + 1

    def delay(self, retry: int) -> float:
        """Wait before retry number ``retry`` (1-based)."""
        return self.base_delay * self.factor ** (retry - 1)


# --- mock backend ------------------------------------------------------------

class TableRule:
    """One-hot scores keyed by image fingerprint."""

    def __init__(self, table: dict[str, ClassLabel]):
        self.table = dict(table)

    @classmethod
    def load(cls, path) -> TableRule:
        table = {}
        for line in Path(path).read_text().splitlines():
            if line.strip() and not line.startswith("#"):
                fp, label = line.split(",", 1)
                table[fp.strip()] = ClassLabel.parse(label)
        return cls(table)

    def __call__(self, image: RasterImage):
        label = self.table.get(image.fingerprint())
        if label is None:
            return None
        return {lb: float(lb is label) for lb in CLASS_LABELS}


class UniformRule:
    def __call__(self, image: RasterImage):
        return None


class AspectRule:
    """Scores labels by how close the lit region's aspect ratio is to an anchor.

    ``score = -|log(aspect / anchor)|``; labels without an anchor score -inf.
    """

    def __init__(self, anchors: dict[ClassLabel, float]):
        self.anchors = dict(anchors)

    def __call__(self, image: RasterImage):
        aspect = lit_aspect_ratio(image)
        if not math.isfinite(aspect):
            return None
        return {
            lb: (-abs(math.log(aspect / self.anchors[lb])) if lb in self.anchors else -math.inf)
            for lb in CLASS_LABELS
        }


def mock_score(prompt: Prompt, rule) -> dict[ClassLabel, float]:
    """Explicit score map for the prompt's query image (uniform if the rule abstains)."""
    scores = rule(prompt.query)
    if scores is None:
        return {lb: 0.0 for lb in CLASS_LABELS}
    return scores


class MockBackend:
    """Deterministic local backend answering ``predict(mock_score(...))``.

    ``failures`` maps a query fingerprint to a number of transient failures
    to inject before answering; ``-1`` fails forever.
    """

    kind = "mock"

    def __init__(self, rule=None, failures: dict[str, int] | None = None):
        self.rule = rule or UniformRule()
        self._failures = dict(failures or {})
        self._lock = threading.Lock()
        self.calls = 0

    def generate(self, prompt: Prompt) -> str:
        fp = prompt.query.fingerprint()
        with self._lock:
            self.calls += 1
            left = self._failures.get(fp, 0)
            if left:
                if left > 0:
                    self._failures[fp] = left - 1
                raise BackendError(f"injected failure for {fp[:12]}")
        return predict(mock_score(prompt, self.rule)).value


# --- remote backend ----------------------------------------------------------

class RemoteBackend:
    """HTTP adapter for generateContent-style endpoints.

    One POST per prompt with interleaved text and base64 PNG parts. The API
    key comes from ``VLM_API_KEY`` and is sent only as a request header.
    """

    kind = "remote"

    def __init__(self, endpoint: str, model: str, api_key_env: str = API_KEY_ENV,
                 key_header: str = "x-goog-api-key", timeout: float = 60.0,
                 client: httpx.Client | None = None):
        key = os.environ.get(api_key_env)
        if not key:
            raise ConfigurationError(f"environment variable {api_key_env} is not set")
        if not endpoint:
            raise ConfigurationError("remote backend needs an endpoint")
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self._key = key
        self._key_header = key_header
        self._client = client or httpx.Client(timeout=timeout)

    def __repr__(self):
        return f"RemoteBackend(endpoint={self.endpoint!r}, model={self.model!r})"

    @property
    def url(self) -> str:
        return f"{self.endpoint}/models/{self.model}:generateContent"

    @staticmethod
    def payload(prompt: Prompt) -> dict:
        parts = []
        for p in prompt.parts:
            if isinstance(p, TextPart):
                parts.append({"text": p.text})
            elif isinstance(p, ImagePart):
                data = base64.b64encode(p.image.to_png()).decode("ascii")
                parts.append({"inline_data": {"mime_type": "image/png", "data": data}})
        return {"contents": [{"role": "user", "parts": parts}], "generationConfig": {"temperature": 0.0}}

    def _scrub(self, text: str) -> str:
        return text.replace(self._key, "***")

    def generate(self, prompt: Prompt) -> str:
        try:
            resp = self._client.post(self.url, json=self.payload(prompt), headers={self._key_header: self._key})
        except httpx.HTTPError as exc:
            raise BackendError(self._scrub(f"{type(exc).__name__}: {exc}")) from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {self._scrub(resp.text[:200])}", transient=False)
        try:
            body = resp.json()
            parts = body["candidates"][0]["content"]["parts"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise BackendError("malformed response body", transient=False) from None
        return "".join(p.get("text", "") for p in parts)


def first_nonempty_line(text: str) -> str:
    for line in text.splitlines():
        if line.strip():
            return line
    return ""


def classify_one(query_id: str, prompt: Prompt, backend, policy: RetryPolicy = RetryPolicy(),
                 clock: Callable[[], float] = time.perf_counter, aliases=None) -> ClassificationResult:
    start = clock()
    error = ""
    for attempt in range(1, policy.max_attempts + 1):
        try:
            text = backend.generate(prompt)
        except BackendError as exc:
            error = str(exc)
            logger.warning("query %s attempt %d failed: %s", query_id, attempt, error)
            if not exc.transient or attempt == policy.max_attempts:
                return ClassificationResult(query_id, "", None, clock() - start, attempt, error)
            policy.sleep(policy.delay(attempt))
            continue
        label = normalize_label(first_nonempty_line(text), aliases)
        return ClassificationResult(query_id, text, label, clock() - start, attempt)
    raise AssertionError("unreachable")


def classify_batch(batch: QueryBatch, backend, policy: RetryPolicy = RetryPolicy(),
                   max_in_flight: int = 4, clock: Callable[[], float] = time.perf_counter, aliases=None):
    """Classify every query in ``batch``; results keep the batch order."""
    if max_in_flight <= 1 or len(batch) <= 1:
        return [classify_one(qid, p, backend, policy, clock, aliases) for qid, p in batch.items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = [pool.submit(classify_one, qid, p, backend, policy, clock, aliases) for qid, p in batch.items]
        return [f.result() for f in futures]


def classify_all(queries, backend, batch_count: int = 5, policy: RetryPolicy = RetryPolicy(),
                 max_in_flight: int = 4, aliases=None):
    """Batch, classify batch by batch, and flatten back into query order."""
    results = []
    for batch in make_batches(queries, batch_count):
        logger.info("batch %d: %d queries", batch.index, len(batch))
        results.extend(classify_batch(batch, backend, policy, max_in_flight, aliases=aliases))
    return results


def write_records(results, path, append: bool = True) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def aspect_anchors_from_dims(dims: dict[ClassLabel, tuple]) -> dict[ClassLabel, float]:
    """Side-view aspect (length / height) for each class archetype."""
    return {lb: float(d[0]) / float(d[2]) for lb, d in dims.items()}


__all__ = [
    "API_KEY_ENV", "AspectRule", "BackendError", "ClassificationResult", "ConfigurationError",
    "MockBackend", "QueryBatch", "RemoteBackend", "RetryPolicy", "TableRule", "UniformRule",
    "aspect_anchors_from_dims", "classify_all", "classify_batch", "classify_one", "make_batches",
    "mock_score", "read_records", "write_records",
]
