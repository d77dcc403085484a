"""HTTP client for generation/embedding services, plus a deterministic mock backend.

Two wire dialects are spoken:

* ``generate_api``: ``POST {base_url}/generate`` with
  ``{"prompt", "temperature", "max_tokens", "stop"}`` answering ``{"text"}``, and
  ``POST {base_url}/embed`` with ``{"texts"}`` answering ``{"vectors"}``.
* ``chat_compat``: ``POST {base_url}/chat/completions`` and
  ``POST {base_url}/embeddings`` in the common chat-completions shape.

``mock`` mode never touches the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import requests

from .errors import EmptyInput, EndpointUnavailable, InvalidValue, RemoteError, SamError
from .ner_eval import Instance, PredictionSet, format_prediction

logger = logging.getLogger(__name__)

MODES = ("generate_api", "chat_compat", "mock")
TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass
class MockProfile:
    recall_by_type: dict[str, float] = field(default_factory=dict)
    spurious_rate: float = 0.0
    seed: int = 0
    default_recall: float = 1.0

    def __post_init__(self):
        probs = [self.spurious_rate, self.default_recall, *self.recall_by_type.values()]
        if any(not 0 <= p <= 1 for p in probs):
            raise InvalidValue(f"mock probabilities must lie in [0, 1]: {probs}")
        self.recall_by_type = {k.lower(): float(v) for k, v in self.recall_by_type.items()}

    def recall(self, etype: str) -> float:
        return self.recall_by_type.get(etype, self.default_recall)

    @classmethod
    def perfect(cls, seed: int = 0) -> "MockProfile":
        return cls({}, 0.0, seed, 1.0)


def _seeded_rng(*parts) -> np.random.Generator:
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return np.random.default_rng(int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little"))


def mock_predict(profile: MockProfile, instance: Instance, fmt: str = "json") -> str:
    """Simulate an expert: keep each gold mention with its type's recall and add
    spurious single-token mentions. A pure function of (profile, instance)."""
    rng = _seeded_rng(profile.seed, instance.instance_id)
    gold = instance.gold.sorted_mentions() if instance.gold is not None else []
    kept = [m for m in gold if rng.random() < profile.recall(m.etype)]
    if profile.spurious_rate > 0:
        types = sorted({m.etype for m in gold} | set(profile.recall_by_type)) or ["misc"]
        for token in instance.tokens:
            if rng.random() < profile.spurious_rate:
                kept.append((token, types[int(rng.integers(len(types)))]))
    return format_prediction(PredictionSet(instance.instance_id, kept), fmt)


def mock_embedding(text: str, dim: int = 64) -> np.ndarray:
    vec = _seeded_rng("embed", text).standard_normal(dim)
    return vec / np.linalg.norm(vec)


_INSTANCE_RE = re.compile(r"^instance_id: (.+)$", re.MULTILINE)


def build_prompt(instance: Instance, entity_types: Sequence[str] = (), fmt: str = "json") -> str:
    types = ", ".join(entity_types) if entity_types else "any"
    shape = '{"entity span": "entity type"}' if fmt == "json" else "Type: span1, span2, ..."
    return (
        "Extract the named entities from the sentence below.\n"
        f"Entity types: {types}\n"
        f"Answer format: {shape}\n"
        f"instance_id: {instance.instance_id}\n"
        f"Sentence: {instance.text}\n"
        "Answer:"
    )


class MockBackend:
    """Answers generation requests from gold labels and per-model profiles.

    Merged models are registered as aliases of their constituent experts; an
    alias behaves like an expert whose recall per type is the best recall of
    its members and whose spurious rate is the members' mean.
    """

    def __init__(self, instances: Sequence[Instance] = (), profiles: Mapping[str, MockProfile] | None = None, dim: int = 64):
        self.instances = {inst.instance_id: inst for inst in instances}
        self.profiles = dict(profiles or {})
        self.aliases: dict[str, list[str]] = {}
        self.dim = dim
        self._lock = threading.Lock()

    def add_alias(self, name: str, members: Sequence[str]) -> None:
        with self._lock:
            self.aliases[name] = list(members)

    def profile_for(self, model: str | None) -> MockProfile:
        if model in self.aliases:
            members = [self.profile_for(m) for m in self.aliases[model]]
            types = sorted({t for p in members for t in p.recall_by_type})
            return MockProfile(
                {t: max(p.recall(t) for p in members) for t in types},
                float(np.mean([p.spurious_rate for p in members])),
                members[0].seed if members else 0,
                max(p.default_recall for p in members),
            )
        return self.profiles.get(model or "", MockProfile.perfect())

    def generate(self, req: "GenerationRequest") -> str:
        match = _INSTANCE_RE.search(req.prompt)
        if match is None or match.group(1).strip() not in self.instances:
            return "{}"
        fmt = "enumeration" if "Type: span1" in req.prompt else "json"
        return mock_predict(self.profile_for(req.model), self.instances[match.group(1).strip()], fmt)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [mock_embedding(t, self.dim) for t in texts]


@dataclass
class EndpointConfig:
    base_url: str = ""
    mode: str = "generate_api"
    timeout: float = 60.0
    max_concurrency: int = 4
    max_retries: int = 3
    auth_token: str | None = None
    backoff_base: float = 0.5
    mock: MockBackend | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidValue(f"unknown endpoint mode {self.mode!r}")
        if self.max_concurrency < 1:
            raise InvalidValue("max_concurrency must be >= 1")
        if not self.timeout > 0:
            raise InvalidValue("timeout must be > 0")
        if self.max_retries < 0:
            raise InvalidValue("max_retries must be >= 0")
        if self.mode == "mock" and self.mock is None:
            self.mock = MockBackend()


@dataclass
class GenerationRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 512
    stop: list[str] | None = None
    # routed as "model" so one server can host several merged adapters
    model: str | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise InvalidValue("temperature must be >= 0")


_local = threading.local()


def _session() -> requests.Session:
    if not hasattr(_local, "session"):
        _local.session = requests.Session()
    return _local.session


def _backoff(cfg: EndpointConfig, attempt: int) -> float:
    delay = cfg.backoff_base * (2**attempt)
    return delay / 2 + random.uniform(0, delay / 2)


def _error_message(resp: requests.Response) -> str:
    try:
        body = resp.json()
    except ValueError:
        return resp.text[:200]
    if isinstance(body, dict):
        err = body.get("error", body.get("message", body))
        if isinstance(err, dict):
            err = err.get("message", err)
        return str(err)
    return str(body)


def _post(cfg: EndpointConfig, path: str, payload: dict) -> dict:
    url = cfg.base_url.rstrip("/") + path
    headers = {"Content-Type": "application/json"}
    if cfg.auth_token:
        headers["Authorization"] = f"Bearer {cfg.auth_token}"
    last = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(_backoff(cfg, attempt - 1))
        try:
            resp = _session().post(url, json=payload, headers=headers, timeout=cfg.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = f"{type(exc).__name__}: {exc}"
            logger.info("attempt %d to %s failed: %s", attempt + 1, url, last)
            continue
        if resp.status_code in TRANSIENT_STATUS:
            last = f"HTTP {resp.status_code}"
            logger.info("attempt %d to %s got %s", attempt + 1, url, last)
            continue
        if not 200 <= resp.status_code < 300:
            raise RemoteError(resp.status_code, _error_message(resp))
        try:
            return resp.json()
        except ValueError as exc:
            raise RemoteError(resp.status_code, f"response is not JSON: {exc}") from exc
    raise EndpointUnavailable(f"{url} unavailable after {cfg.max_retries + 1} attempts ({last})")


def generate(cfg: EndpointConfig, req: GenerationRequest) -> str:
    if cfg.mode == "mock":
        return cfg.mock.generate(req)
    if cfg.mode == "chat_compat":
        payload = {
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.stop:
            payload["stop"] = req.stop
        if req.model:
            payload["model"] = req.model
        body = _post(cfg, "/chat/completions", payload)
        try:
            return str(body["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise RemoteError(200, f"unexpected chat response shape: {exc}") from exc
    payload = {"prompt": req.prompt, "temperature": req.temperature, "max_tokens": req.max_tokens, "stop": req.stop or []}
    if req.model:
        payload["model"] = req.model
    body = _post(cfg, "/generate", payload)
    if not isinstance(body, dict) or not isinstance(body.get("text"), str):
        raise RemoteError(200, "response lacks a 'text' string")
    return body["text"]


def batch_generate(cfg: EndpointConfig, reqs: Sequence[GenerationRequest]) -> list:
    """Run requests with at most ``cfg.max_concurrency`` in flight.

    Results are aligned with ``reqs``; a failed item holds its exception
    instead of a string and does not abort the rest of the batch.
    """

    def one(req):
        try:
            return generate(cfg, req)
        except SamError as exc:
            return exc

    if not reqs:
        return []
    with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
        return list(pool.map(one, reqs))


def embed(cfg: EndpointConfig, texts: Sequence[str]) -> list[np.ndarray]:
    if not texts:
        raise EmptyInput("no texts to embed")
    if cfg.mode == "mock":
        return cfg.mock.embed(texts)
    if cfg.mode == "chat_compat":
        body = _post(cfg, "/embeddings", {"input": list(texts)})
        try:
            vectors = [d["embedding"] for d in sorted(body["data"], key=lambda d: d.get("index", 0))]
        except (KeyError, TypeError) as exc:
            raise RemoteError(200, f"unexpected embeddings response shape: {exc}") from exc
    else:
        body = _post(cfg, "/embed", {"texts": list(texts)})
        vectors = body.get("vectors") if isinstance(body, dict) else None
        if not isinstance(vectors, list):
            raise RemoteError(200, "response lacks a 'vectors' list")
    if len(vectors) != len(texts):
        raise RemoteError(200, f"{len(vectors)} vectors for {len(texts)} texts")
    try:
        arrays = [np.asarray(v, dtype=np.float64) for v in vectors]
    except (TypeError, ValueError) as exc:
        raise RemoteError(200, f"non-numeric embedding: {exc}") from exc
    dims = {a.shape for a in arrays}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise RemoteError(200, f"inconsistent embedding dimensions {sorted(dims)}")
    return arrays
