"""HTTP chat / embedding backends with a content-addressed disk cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from glyrag.context import (
    TEXT_DIM,
    ContextSummary,
    WindowSummaryFeatures,
    build_prompt,
    prompt_key,
    summarize_rule_based,
)

log = logging.getLogger(__name__)


class RemoteError(RuntimeError):
    pass


@dataclass
class EndpointConfig:
    url: str | None = None
    embed_url: str | None = None
    model: str = "gpt-4o"
    token: str | None = None
    cache_dir: str | os.PathLike = "cache"
    attempts: int = 3
    backoff: float = 0.5  # seconds; doubles after each failed attempt
    timeout: float = 30.0
    fail_hard: bool = False
    parallel: int = 4
    extra_headers: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        env = {
            "url": os.environ.get("GLYRAG_CHAT_URL"),
            "embed_url": os.environ.get("GLYRAG_EMBED_URL"),
            "token": os.environ.get("GLYRAG_API_TOKEN"),
        }
        if os.environ.get("GLYRAG_CHAT_MODEL"):
            env["model"] = os.environ["GLYRAG_CHAT_MODEL"]
        env.update(overrides)
        return cls(**{k: v for k, v in env.items() if v is not None})


class DiskCache:
    """``<dir>/<sha256-prefix>.json`` entries, written atomically."""

    def __init__(self, directory, prefix_len: int = 32):
        self.dir = Path(directory)
        self.prefix_len = prefix_len

    def path(self, key: str) -> Path:
        return self.dir / f"{key[: self.prefix_len]}.json"

    def get(self, key: str):
        p = self.path(key)
        if not p.exists():
            return None
        entry = json.loads(p.read_text(encoding="utf-8"))
        return entry if entry.get("prompt_hash") == key else None

    def put(self, key: str, entry: dict) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        entry = {"prompt_hash": key, **entry}
        fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, sort_keys=True)
        os.replace(tmp, self.path(key))


def _post(cfg: EndpointConfig, url: str, body: dict) -> dict:
    headers = {"Content-Type": "application/json", **cfg.extra_headers}
    if cfg.token:
        headers["Authorization"] = f"Bearer {cfg.token}"
    delay = cfg.backoff
    last = None
    for attempt in range(cfg.attempts):
        try:
            r = requests.post(url, json=body, headers=headers, timeout=cfg.timeout)
            if r.status_code == 200:
                return r.json()
            last = RemoteError(f"HTTP {r.status_code} from {url}")
        except (requests.RequestException, ValueError) as exc:
            last = RemoteError(f"{type(exc).__name__}: {exc}")
        if attempt + 1 < cfg.attempts:
            time.sleep(delay)
            delay *= 2
    raise last


def chat(system: str, user: str, cfg: EndpointConfig) -> str:
    """Send one two-message chat and return the assistant text (cached)."""
    key = prompt_key(system, user)
    cache = DiskCache(cfg.cache_dir)
    hit = cache.get(key)
    if hit is not None:
        return hit["text"]
    if not cfg.url:
        raise RemoteError("no chat endpoint configured")
    body = {"model": cfg.model, "messages": [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]}
    resp = _post(cfg, cfg.url, body)
    try:
        text = resp["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise RemoteError(f"malformed chat response: {exc}") from exc
    if not isinstance(text, str) or not text.strip():
        raise RemoteError("empty chat response")
    cache.put(key, {"backend": "remote", "text": text})
    return text


def summarize_remote(features: WindowSummaryFeatures, x, cfg: EndpointConfig, window_ref: str = "") -> ContextSummary:
    system, user = build_prompt(features, x)
    try:
        return ContextSummary(chat(system, user, cfg), "remote", window_ref)
    except RemoteError as exc:
        if cfg.fail_hard:
            raise
        log.warning("remote summary failed for %s (%s); using rule-based text", window_ref or "window", exc)
        return summarize_rule_based(features, x, window_ref)


def summarize_many(items, cfg: EndpointConfig) -> list[ContextSummary]:
    """``items``: iterable of ``(features, x, window_ref)``; order is preserved."""
    items = list(items)
    with ThreadPoolExecutor(max_workers=max(1, cfg.parallel)) as pool:
        return list(pool.map(lambda it: summarize_remote(it[0], it[1], cfg, it[2]), items))


def embed_remote(text: str, cfg: EndpointConfig) -> np.ndarray:
    if not text.strip():
        raise ValueError("cannot embed empty text")
    key = hashlib.sha256(("embed\n" + text).encode("utf-8")).hexdigest()
    cache = DiskCache(cfg.cache_dir)
    hit = cache.get(key)
    if hit is None:
        if not cfg.embed_url:
            raise RemoteError("no embedding endpoint configured")
        resp = _post(cfg, cfg.embed_url, {"input": text})
        vec = resp.get("embedding") if isinstance(resp, dict) else None
        if not isinstance(vec, list) or len(vec) != TEXT_DIM:
            raise RemoteError(f"embedding response must hold {TEXT_DIM} floats")
        hit = {"backend": "remote", "embedding": [float(v) for v in vec]}
        cache.put(key, hit)
    return np.asarray(hit["embedding"], dtype=np.float64)
