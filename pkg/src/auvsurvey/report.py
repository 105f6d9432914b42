"""LLM summaries of detections and clusters.

Prompts are rendered from two fixed templates. Responses come from any
OpenAI-style chat-completion endpoint or from an offline mock, and are cached
on disk under a hash of (prompt, attachment, model tag).
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import string
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

from .geo import DetectionEvent, iso

log = logging.getLogger(__name__)

DETECTION_FIELDS = ("summary", "shape", "size", "texture", "discernible patterns", "likely environments")
MAX_REPRESENTATIVES = 5
CLUSTER_PROMPT_BUDGET = 4000
MOCK_CREATED_AT = "1970-01-01T00:00:00Z"


class ReportError(RuntimeError):
    pass


class CredentialError(ReportError):
    pass


class TransportError(ReportError):
    pass


class ProtocolError(ReportError):
    pass


class TemplateError(ReportError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str

    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.text) if f}

    def render(self, **values) -> str:
        missing = self.placeholders() - set(values)
        if missing:
            raise TemplateError(f"template {self.id!r} missing values for: {', '.join(sorted(missing))}")
        return self.text.format(**values)


DETECTION_TEMPLATE = PromptTemplate(
    "detection_analysis",
    "You are assisting a marine survey. The attached image is a crop taken from an "
    "underwater object detector's output, recorded in a sea environment. The detector "
    "labelled it '{class_name}' with confidence {confidence}.{location_clause}\n"
    "Describe the detected object using exactly these sections:\n"
    "1. Summary: a brief overview of what the object most likely is.\n"
    "2. Shape: its outline and body form.\n"
    "3. Size: its apparent size, absolute if it can be estimated.\n"
    "4. Texture: surface texture and colouring.\n"
    "5. Discernible patterns: markings, stripes, spots or other patterns.\n"
    "6. Likely environments: places where this object might exist, live, or is commonly seen.",
)

CLUSTER_TEMPLATE = PromptTemplate(
    "cluster_analysis",
    "You are assisting a marine survey. Underwater detector crops were embedded, reduced "
    "with PCA and grouped with K-means into {k} clusters over {n_points} crops.\n"
    "Cluster sizes and representative crop ids:\n{cluster_lines}\n"
    "Give insight into the variety across these clusters: which clusters are large or "
    "small, which may hold unusual or possibly new objects, and what the grouping suggests "
    "for future detections.",
)


def _location_clause(event: DetectionEvent) -> str:
    loc = event.location
    if loc is None:
        return ""
    return f" It was recorded at latitude {loc.lat:.5f}, longitude {loc.lon:.5f} at {iso(loc.timestamp)}."


def build_detection_prompt(event: DetectionEvent) -> str:
    name = event.class_name or f"class {event.detection.class_id}"
    return DETECTION_TEMPLATE.render(
        class_name=name,
        confidence=f"{event.detection.confidence:.2f}",
        location_clause=_location_clause(event),
    )


@dataclass
class ClusterStats:
    sizes: list[int]
    representatives: dict[int, list[str]] = field(default_factory=dict)
    n_points: int | None = None


def cluster_stats(labels, ids: Sequence[str], distances=None, k: int | None = None) -> ClusterStats:
    """Sizes per cluster plus up to five members closest to each centroid."""
    labels = [int(v) for v in labels]
    k = k if k is not None else (max(labels) + 1 if labels else 0)
    sizes = [0] * k
    members: dict[int, list[tuple[float, int]]] = {}
    for i, lab in enumerate(labels):
        sizes[lab] += 1
        d = float(distances[i]) if distances is not None else 0.0
        members.setdefault(lab, []).append((d, i))
    reps = {lab: [ids[i] for _, i in sorted(m)[:MAX_REPRESENTATIVES]] for lab, m in sorted(members.items())}
    return ClusterStats(sizes, reps, len(labels))


def build_cluster_prompt(model, stats: ClusterStats, max_chars: int = CLUSTER_PROMPT_BUDGET) -> str:
    """Compact text description of a fitted clustering.

    Representatives are cut from five per cluster downwards until the prompt
    fits within ``max_chars``.
    """
    k = getattr(model, "k", len(stats.sizes))
    n_points = stats.n_points if stats.n_points is not None else sum(stats.sizes)
    text = ""
    for cap in range(MAX_REPRESENTATIVES, -1, -1):
        lines = []
        for lab, size in enumerate(stats.sizes):
            line = f"- cluster {lab}: {size} crops"
            reps = stats.representatives.get(lab, [])[:cap]
            if reps:
                line += "; e.g. " + ", ".join(reps)
            lines.append(line)
        text = CLUSTER_TEMPLATE.render(k=k, n_points=n_points, cluster_lines="\n".join(lines))
        if len(text) <= max_chars:
            break
    return text


# ---------------------------------------------------------------------------
# reports + cache


@dataclass(frozen=True)
class SummaryReport:
    subject_id: str
    prompt_id: str
    response_text: str
    model_tag: str
    created_at: str
    token_usage: dict[str, int] | None = None
    cache_key: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SummaryReport":
        return cls(
            subject_id=str(d["subject_id"]),
            prompt_id=str(d["prompt_id"]),
            response_text=str(d["response_text"]),
            model_tag=str(d["model_tag"]),
            created_at=str(d["created_at"]),
            token_usage=d.get("token_usage"),
            cache_key=str(d.get("cache_key", "")),
        )


def cache_key(prompt: str, attachment: bytes | None, model_tag: str) -> str:
    h = hashlib.sha256()
    for part in (prompt.encode("utf-8"), attachment or b"", model_tag.encode("utf-8")):
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return h.hexdigest()


class ReportCache:
    """One JSON file per report, ``<dir>/<sha256>.json``; writes are atomic renames."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> SummaryReport | None:
        p = self.path(key)
        try:
            raw = p.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            return SummaryReport.from_dict(json.loads(raw))
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", p.name, exc)
            return None

    def put(self, key: str, report: SummaryReport) -> None:
        data = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, self.path(key))

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.json"))


# ---------------------------------------------------------------------------
# client


@dataclass
class LLMConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    api_key_env: str = "LLM_API_KEY"
    mock: bool = False
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 1.0
    max_concurrent: int = 2
    max_tokens: int = 600

    @property
    def model_tag(self) -> str:
        return f"mock:{self.model}" if self.mock else self.model


def mock_response(prompt: str, prompt_id: str) -> str:
    digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]
    if prompt_id == "detection_analysis":
        body = "\n".join(f"{i}. {f.capitalize()}: offline placeholder." for i, f in enumerate(DETECTION_FIELDS, 1))
    else:
        body = "Offline placeholder cluster analysis."
    return f"[mock response {digest}]\n{body}"


class LLMClient:
    """Chat-completion client with retry, on-disk cache and an offline mock."""

    def __init__(
        self,
        config: LLMConfig,
        cache: ReportCache | None = None,
        http: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.cache = cache
        self._http = http
        self._sleep = sleep
        self._gate = threading.Semaphore(max(1, config.max_concurrent))
        self.network_calls = 0
        self.cache_hits = 0
        self._lock = threading.Lock()

    def _client(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(timeout=self.config.timeout)
        return self._http

    def close(self) -> None:
        if self._http is not None:
            self._http.close()

    def summarize(
        self,
        prompt: str,
        attachment: bytes | None = None,
        subject_id: str = "",
        prompt_id: str = "detection_analysis",
    ) -> SummaryReport:
        key = cache_key(prompt, attachment, self.config.model_tag)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                with self._lock:
                    self.cache_hits += 1
                return hit
        if self.config.mock:
            report = SummaryReport(subject_id, prompt_id, mock_response(prompt, prompt_id), self.config.model_tag, MOCK_CREATED_AT, None, key)
        else:
            with self._gate:
                text, usage = self._request(prompt, attachment)
            created = iso(datetime.now(timezone.utc))
            report = SummaryReport(subject_id, prompt_id, text, self.config.model_tag, created, usage, key)
        if self.cache is not None:
            self.cache.put(key, report)
        return report

    def summarize_many(self, jobs: Sequence[dict]) -> list[SummaryReport]:
        """Run several ``summarize`` calls, at most ``max_concurrent`` in flight; order preserved."""
        with ThreadPoolExecutor(max_workers=max(1, self.config.max_concurrent)) as pool:
            return list(pool.map(lambda j: self.summarize(**j), jobs))

    def _payload(self, prompt: str, attachment: bytes | None) -> dict:
        content: list[dict] = [{"type": "text", "text": prompt}]
        if attachment:
            b64 = base64.b64encode(attachment).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return {
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": self.config.max_tokens,
        }

    def _request(self, prompt: str, attachment: bytes | None) -> tuple[str, dict | None]:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise CredentialError(f"environment variable {self.config.api_key_env} is not set")
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        payload = self._payload(prompt, attachment)
        headers = {"Authorization": f"Bearer {key}"}
        last: Exception | None = None
        for attempt in range(self.config.attempts):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            with self._lock:
                self.network_calls += 1
            try:
                resp = self._client().post(url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code in (401, 403):
                raise CredentialError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse(resp)
        raise TransportError(f"gave up after {self.config.attempts} attempts: {last}")

    @staticmethod
    def _parse(resp: httpx.Response) -> tuple[str, dict | None]:
        try:
            doc = resp.json()
            content = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from None
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not content or not str(content).strip():
            raise ProtocolError("model returned an empty reply")
        usage = doc.get("usage")
        if isinstance(usage, dict):
            usage = {k: int(v) for k, v in usage.items() if isinstance(v, int)}
        else:
            usage = None
        return str(content), usage
