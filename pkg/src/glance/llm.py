"""Text expert: ego / 1-hop / 2-hop prompt serialisation, pluggable embedding
providers, a content-addressed JSONL cache and the concatenated z_L embedding."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

from .exceptions import ConfigError, MissingArtifactError, ProviderError
from .graph import TextAttributedGraph, sample_khop
from .utils import sha256_hex

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "glance-prompt-v1"
INSTRUCT = "Instruct: Predict the node's category from the provided context."
TERMINATOR = "Category?\n</END>"
API_KEY_ENV = "GLANCE_API_KEY"


@dataclass(frozen=True)
class PromptBundle:
    node: int
    ego_prompt: str
    hop1_prompt: str
    hop2_prompt: str
    n_hop1: int
    n_hop2: int

    @property
    def prompts(self) -> tuple[str, str, str]:
        return (self.ego_prompt, self.hop1_prompt, self.hop2_prompt)


def _render(class_names, ego: str, hop_tag: str | None, neighbours: list[str]) -> str:
    head = f"{INSTRUCT}\nPossible categories: [{', '.join(class_names)}].\nQuery:\nEGO:\n{ego}\n"
    body = ""
    if hop_tag is not None:
        body = f"{hop_tag}:\n" + "".join(f"- {t}\n" for t in neighbours)
    return head + body + TERMINATOR


def _fit_prompt(class_names, ego, hop_tag, neighbours, max_chars, char_budget):
    """Render, shrinking every node's text evenly until the prompt fits ``max_chars``."""
    clean = [t.replace("\n", " ") for t in [ego, *neighbours]]
    per_node = char_budget
    while True:
        texts = [t[:per_node] for t in clean]
        prompt = _render(class_names, texts[0], hop_tag, texts[1:])
        if len(prompt) <= max_chars or per_node == 0:
            return prompt
        overhead = len(_render(class_names, "", hop_tag, [""] * (len(texts) - 1)))
        per_node = min(per_node - 1, max(0, (max_chars - overhead) // len(texts)))


def serialize_prompts(g: TextAttributedGraph, v: int, class_names=None, seed: int = 0,
                      per_node_cap: int = 5, char_budget: int = 2000,
                      ego_max_chars: int = 1024, hop_max_chars: int = 4096) -> PromptBundle:
    names = list(class_names) if class_names is not None else list(g.class_names)
    if len(names) != g.num_classes:
        raise ConfigError("class_names length must equal num_classes")
    sample = sample_khop(g, v, 2, per_node_cap, seed)
    hop1 = [g.texts[u] for u, h in sample if h == 1]
    hop2 = [g.texts[u] for u, h in sample if h == 2]
    ego = g.texts[v]
    return PromptBundle(
        node=v,
        ego_prompt=_fit_prompt(names, ego, None, [], ego_max_chars, char_budget),
        hop1_prompt=_fit_prompt(names, ego, "HOP1", hop1, hop_max_chars, char_budget),
        hop2_prompt=_fit_prompt(names, ego, "HOP2", hop2, hop_max_chars, char_budget),
        n_hop1=len(hop1),
        n_hop2=len(hop2),
    )


def cache_key(prompt: str) -> str:
    return sha256_hex(f"{TEMPLATE_VERSION}\n{prompt}")


_TOKEN = re.compile(r"[a-z0-9]+")


def mock_embed(text: str, dim: int, seed: int = 0, vocab=None, noise_scale: float = 0.3) -> np.ndarray:
    """Deterministic stand-in for an LLM embedding.

    The first ``len(vocab)`` coordinates are the normalised histogram of class
    tokens in ``text``; the rest is noise seeded by a hash of the text.
    """
    vocab = vocab or []
    C = len(vocab)
    if dim < C + 8:
        raise ConfigError(f"mock embedding dim must be >= num_classes + 8 (= {C + 8})")
    lookup = {w: c for c, pool in enumerate(vocab) for w in pool}
    hist = np.zeros(C)
    for tok in _TOKEN.findall(text.lower()):
        c = lookup.get(tok)
        if c is not None:
            hist[c] += 1
    if hist.sum() > 0:
        hist /= hist.sum()
    digest = sha256_hex(f"{seed}\x00{text}")
    rng = np.random.default_rng(int(digest[:16], 16))
    noise = rng.standard_normal(dim - C) * noise_scale / np.sqrt(dim - C)
    return np.concatenate([hist, noise])


class MockProvider:
    kind = "mock"

    def __init__(self, dim: int = 32, seed: int = 0, vocab=None, noise_scale: float = 0.3):
        self.dim = dim
        self.seed = seed
        self.vocab = vocab
        self.noise_scale = noise_scale
        self.calls = 0
        self.requests = 0
        mock_embed("", dim, seed, vocab, noise_scale)  # validates dim early

    def embed(self, prompts) -> np.ndarray:
        self.requests += 1
        self.calls += len(prompts)
        return np.array([mock_embed(p, self.dim, self.seed, self.vocab, self.noise_scale) for p in prompts])


class EmbeddingCache:
    """Append-only JSONL store ``{"k": sha256, "d": dim, "v": [...]}`` keyed by prompt hash."""

    def __init__(self, path):
        self.path = Path(path)
        self._data: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            with self.path.open() as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        vec = np.asarray(rec["v"], dtype=np.float64)
                        if vec.shape != (int(rec["d"]),) or not isinstance(rec["k"], str):
                            raise ValueError("dimension field disagrees with vector")
                    except (ValueError, KeyError, TypeError) as exc:
                        log.warning("%s:%d: skipping corrupt cache record (%s)", self.path, lineno, exc)
                        continue
                    self._data.setdefault(rec["k"], vec)

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, key: str):
        return self._data.get(key)

    def put(self, key: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        with self._lock:
            if key in self._data:
                return
            self._data[key] = vec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps({"k": key, "d": int(vec.shape[0]), "v": vec.tolist()}) + "\n")


class FileCacheProvider:
    """Replays embeddings from a cache file only; unknown prompts are an error."""

    kind = "file-cache"

    def __init__(self, cache_path, dim: int):
        if not Path(cache_path).exists():
            raise MissingArtifactError(f"embedding cache not found: {cache_path}")
        self.cache = EmbeddingCache(cache_path)
        self.dim = dim
        self.calls = 0
        self.requests = 0

    def embed(self, prompts) -> np.ndarray:
        out = []
        for p in prompts:
            vec = self.cache.get(cache_key(p))
            if vec is None:
                raise ProviderError("prompt missing from embedding cache", cache_key(p), retryable=False)
            out.append(vec)
        return np.array(out).reshape(len(prompts), self.dim)


class HttpProvider:
    """OpenAI-compatible ``POST {endpoint}/embeddings`` client with batching and backoff."""

    kind = "http"

    def __init__(self, endpoint: str, model: str, dim: int, batch_size: int = 64, max_retries: int = 3,
                 backoff: float = 0.5, timeout: float = 30.0, max_in_flight: int = 1):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.dim = dim
        self.batch_size = batch_size
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self.calls = 0
        self.requests = 0
        self.retries = 0
        self._lock = threading.Lock()

    def _headers(self):
        key = os.environ.get(API_KEY_ENV)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _post(self, client: httpx.Client, chunk: list[str]) -> np.ndarray:
        body = {"model": self.model, "input": chunk}
        for attempt in range(self.max_retries + 1):
            with self._lock:
                self.requests += 1
            try:
                resp = client.post(f"{self.endpoint}/embeddings", json=body, headers=self._headers())
            except httpx.TransportError as exc:
                err = ProviderError(f"embedding request failed: {exc}", cache_key(chunk[0]))
            else:
                if resp.status_code // 100 == 2:
                    return self._parse(resp.json(), chunk)
                retryable = resp.status_code == 429 or resp.status_code >= 500
                err = ProviderError(f"embedding endpoint returned HTTP {resp.status_code}",
                                    cache_key(chunk[0]), retryable=retryable)
                if not retryable:
                    raise err
            if attempt == self.max_retries:
                raise err
            with self._lock:
                self.retries += 1
            time.sleep(self.backoff * 2**attempt)
        raise AssertionError("unreachable")

    def _parse(self, payload, chunk) -> np.ndarray:
        data = payload.get("data") if isinstance(payload, dict) else None
        if not isinstance(data, list) or len(data) != len(chunk):
            got = len(data) if isinstance(data, list) else "no"
            raise ProviderError(f"expected {len(chunk)} embeddings, got {got}", cache_key(chunk[0]),
                                retryable=False)
        out = np.zeros((len(chunk), self.dim))
        seen = set()
        for item in data:
            i = int(item["index"])
            vec = np.asarray(item["embedding"], dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ConfigError(f"provider returned dim {vec.shape[0]}, configured dim is {self.dim}")
            if not 0 <= i < len(chunk) or i in seen:
                raise ProviderError(f"bad response index {i}", cache_key(chunk[0]), retryable=False)
            seen.add(i)
            out[i] = vec
        return out

    def embed(self, prompts) -> np.ndarray:
        prompts = list(prompts)
        if not prompts:
            return np.zeros((0, self.dim))
        chunks = [prompts[i:i + self.batch_size] for i in range(0, len(prompts), self.batch_size)]
        with httpx.Client(timeout=self.timeout) as client:
            if self.max_in_flight > 1 and len(chunks) > 1:
                with ThreadPoolExecutor(self.max_in_flight) as pool:
                    parts = list(pool.map(lambda c: self._post(client, c), chunks))
            else:
                parts = [self._post(client, c) for c in chunks]
        self.calls += len(prompts)
        return np.concatenate(parts, axis=0)


class CachedProvider:
    """Serves cache hits locally and forwards misses to ``inner`` in one batch."""

    def __init__(self, inner, cache: EmbeddingCache):
        self.inner = inner
        self.cache = cache
        self.dim = inner.dim
        self.kind = inner.kind

    @property
    def calls(self):
        return self.inner.calls

    @property
    def requests(self):
        return self.inner.requests

    def embed(self, prompts) -> np.ndarray:
        prompts = list(prompts)
        keys = [cache_key(p) for p in prompts]
        missing = list(dict.fromkeys(p for p, k in zip(prompts, keys) if k not in self.cache))
        if missing:
            vecs = self.inner.embed(missing)
            for p, vec in zip(missing, vecs):
                if vec.shape != (self.dim,):
                    raise ConfigError(f"provider returned dim {vec.shape[0]}, expected {self.dim}")
                self.cache.put(cache_key(p), vec)
        out = []
        for k in keys:
            vec = self.cache.get(k)
            if vec.shape != (self.dim,):
                raise ConfigError(f"cached vector has dim {vec.shape[0]}, provider dim is {self.dim}")
            out.append(vec)
        return np.array(out).reshape(len(prompts), self.dim)


def make_provider(cfg: dict, vocab=None):
    """Build a provider from a config mapping (``kind`` plus kind-specific keys)."""
    kind = cfg.get("kind", "mock")
    dim = int(cfg.get("dim", 32))
    if kind == "mock":
        provider = MockProvider(dim, int(cfg.get("seed", 0)), vocab, float(cfg.get("noise_scale", 0.3)))
    elif kind == "file-cache":
        if not cfg.get("cache_path"):
            raise ConfigError("file-cache provider needs cache_path")
        return FileCacheProvider(cfg["cache_path"], dim)
    elif kind == "http":
        if not cfg.get("endpoint"):
            raise ConfigError("http provider needs an endpoint")
        provider = HttpProvider(cfg["endpoint"], cfg.get("model", ""), dim, int(cfg.get("batch_size", 64)),
                                int(cfg.get("max_retries", 3)), float(cfg.get("backoff", 0.5)),
                                float(cfg.get("timeout", 30.0)), int(cfg.get("max_in_flight", 1)))
    else:
        raise ConfigError(f"unknown provider kind {kind!r}")
    if cfg.get("cache_path"):
        return CachedProvider(provider, EmbeddingCache(cfg["cache_path"]))
    return provider


def _l2(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def embed_bundles(provider, bundles, empty_segments: str = "fallback") -> np.ndarray:
    """z_L for each bundle: one batched provider call, each segment l2-normalised,
    concatenated as ego, hop1, hop2.

    With ``empty_segments="zero"`` a hop segment with no sampled neighbours is
    all zeros instead of the embedding of its ego-only prompt.
    """
    if empty_segments not in ("fallback", "zero"):
        raise ValueError("empty_segments must be 'fallback' or 'zero'")
    bundles = list(bundles)
    e = provider.dim
    if not bundles:
        return np.zeros((0, 3 * e))
    unique = list(dict.fromkeys(p for b in bundles for p in b.prompts))
    try:
        vecs = provider.embed(unique)
    except (ProviderError, ConfigError):
        raise
    except Exception as exc:  # anything else from a provider is reported as retryable
        raise ProviderError(f"embedding provider failed: {exc}", cache_key(unique[0])) from exc
    vecs = np.asarray(vecs, dtype=np.float64)
    if vecs.shape != (len(unique), e):
        raise ConfigError(f"provider returned shape {vecs.shape}, expected {(len(unique), e)}")
    lookup = dict(zip(unique, vecs))
    out = np.zeros((len(bundles), 3 * e))
    for i, b in enumerate(bundles):
        for s, (prompt, count) in enumerate(zip(b.prompts, (1, b.n_hop1, b.n_hop2))):
            if count == 0 and empty_segments == "zero":
                continue
            out[i, s * e:(s + 1) * e] = _l2(lookup[prompt])
    return out


def embed_node(provider, bundle: PromptBundle, empty_segments: str = "fallback") -> np.ndarray:
    return embed_bundles(provider, [bundle], empty_segments)[0]
