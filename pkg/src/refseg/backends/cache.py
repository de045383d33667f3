"""Content-addressed, append-only on-disk response cache.

Layout: ``<root>/<kind>/<first two hex>/<digest>.json`` holding
``{request_digest, response, created_at}``.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from ..masks import InstanceImage
from .base import Embedding, KINDS, canonical_json, file_sha256, sha256_hex

log = logging.getLogger(__name__)

CACHE_ENV = "REFSEG_CACHE_DIR"
DEFAULT_CACHE_DIR = "cache"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or DEFAULT_CACHE_DIR)


@dataclass(frozen=True)
class CacheKey:
    kind: str
    digest: str

    @classmethod
    def of(cls, kind: str, model_tag: str, payload: Any) -> CacheKey:
        blob = canonical_json({"kind": kind, "model_tag": model_tag, "payload": payload})
        return cls(kind, sha256_hex(blob))


class ResponseCache:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self._guard = threading.Lock()
        self._locks: dict[CacheKey, threading.Lock] = {}
        self.hits = 0
        self.misses = 0

    def path_for(self, key: CacheKey) -> Path:
        return self.root / key.kind / key.digest[:2] / f"{key.digest}.json"

    def _lock_for(self, key: CacheKey) -> threading.Lock:
        with self._guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def get(self, key: CacheKey) -> Any | None:
        path = self.path_for(key)
        try:
            with open(path, encoding="utf-8") as f:
                record = json.load(f)
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            log.warning("ignoring unreadable cache entry %s", path)
            return None
        return record["response"]

    def put(self, key: CacheKey, response: Any) -> None:
        path = self.path_for(key)
        if path.exists():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "request_digest": key.digest,
            "response": response,
            "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(record, f)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def get_or_compute(self, key: CacheKey, compute: Callable[[], Any]) -> Any:
        hit = self.get(key)
        if hit is not None:
            with self._guard:
                self.hits += 1
            return hit
        with self._lock_for(key):
            hit = self.get(key)
            if hit is not None:
                with self._guard:
                    self.hits += 1
                return hit
            value = compute()
            self.put(key, value)
            with self._guard:
                self.misses += 1
            return value

    def stats(self) -> dict[str, dict[str, int]]:
        out = {}
        for kind in KINDS:
            d = self.root / kind
            files = list(d.glob("*/*.json")) if d.exists() else []
            out[kind] = {"entries": len(files), "bytes": sum(p.stat().st_size for p in files)}
        return out

    def gc(self, kind: str | None = None, older_than_s: float | None = None) -> int:
        """Delete entries (optionally one kind, optionally only older ones). Returns count."""
        kinds = [kind] if kind else list(KINDS)
        cutoff = time.time() - older_than_s if older_than_s is not None else None
        removed = 0
        for k in kinds:
            d = self.root / k
            if not d.exists():
                continue
            for p in d.glob("*/*.json"):
                if p.name.startswith(".tmp-") or cutoff is None or p.stat().st_mtime < cutoff:
                    p.unlink(missing_ok=True)
                    removed += 1
            for sub in d.iterdir():
                if sub.is_dir() and not any(sub.iterdir()):
                    sub.rmdir()
        return removed


class _Cached:
    def __init__(self, inner: Any, cache: ResponseCache) -> None:
        self.inner = inner
        self.cache = cache
        self.kind = inner.kind

    def fingerprint(self) -> dict:
        return self.inner.fingerprint()

    def _key(self, payload: dict) -> CacheKey:
        fp = self.inner.fingerprint()
        return CacheKey.of(self.kind, fp.get("model_tag", ""), {"backend": fp, **payload})


class CachedMllm(_Cached):
    def generate(self, image_path: Path, prompt: str) -> str:
        key = self._key({"image_sha256": file_sha256(image_path), "prompt": prompt})
        return self.cache.get_or_compute(key, lambda: self.inner.generate(image_path, prompt))


class CachedTextEncoder(_Cached):
    def encode_text(self, text: str) -> Embedding:
        key = self._key({"text": text})
        values = self.cache.get_or_compute(key, lambda: self.inner.encode_text(text).tolist())
        return Embedding(values)


class CachedImageEncoder(_Cached):
    @property
    def resolution(self) -> int:
        return self.inner.resolution

    def encode_image(self, img: InstanceImage) -> Embedding:
        key = self._key({"image": img.digest, "strategy_tag": img.strategy_tag})
        values = self.cache.get_or_compute(key, lambda: self.inner.encode_image(img).tolist())
        return Embedding(values)


class CachedNounPhrases(_Cached):
    def extract(self, text: str) -> list[str]:
        key = self._key({"text": text})
        return list(self.cache.get_or_compute(key, lambda: self.inner.extract(text)))
