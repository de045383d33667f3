"""Pluggable model backends: MLLM, text/image encoders and noun-phrase extraction."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Mapping

import httpx

from ..errors import ConfigError
from .base import (
    KINDS,
    BackendId,
    Backends,
    Embedding,
    ImageEncoder,
    MllmBackend,
    NounPhraseExtractor,
    TextEncoder,
)
from .cache import (
    CacheKey,
    CachedImageEncoder,
    CachedMllm,
    CachedNounPhrases,
    CachedTextEncoder,
    ResponseCache,
    default_cache_dir,
)
from .http import HttpClient, HttpImageEncoder, HttpMllm, HttpNounPhraseExtractor, HttpTextEncoder
from .nounphrase import extract_noun_phrases
from .stub import FixtureTable, StubImageEncoder, StubMllm, StubNounPhraseExtractor, StubTextEncoder

__all__ = [
    "KINDS",
    "BackendId",
    "Backends",
    "CacheKey",
    "Embedding",
    "FixtureTable",
    "ImageEncoder",
    "MllmBackend",
    "NounPhraseExtractor",
    "ResponseCache",
    "TextEncoder",
    "build_backend",
    "build_backends",
    "default_backend_ids",
    "default_cache_dir",
    "extract_noun_phrases",
    "wrap_cached",
]

_STUBS = {
    "mllm": StubMllm,
    "text_encoder": StubTextEncoder,
    "image_encoder": StubImageEncoder,
    "np_extractor": StubNounPhraseExtractor,
}

_CACHED = {
    "mllm": CachedMllm,
    "text_encoder": CachedTextEncoder,
    "image_encoder": CachedImageEncoder,
    "np_extractor": CachedNounPhrases,
}


def default_backend_ids(resolution: int = 224) -> dict[str, BackendId]:
    return {k: BackendId(kind=k, resolution=resolution) for k in KINDS}


def build_backend(
    bid: BackendId,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] | None = None,
):
    """Instantiate one uncached backend from its id."""
    if bid.impl in ("stub", "file"):
        table = FixtureTable.load(bid.endpoint_or_path) if bid.endpoint_or_path else None
        kwargs: dict = {"model_tag": bid.model_tag, "seed": bid.seed, "table": table, "strict": bid.impl == "file"}
        if bid.kind in ("text_encoder", "image_encoder"):
            kwargs["dim"] = bid.dim
        if bid.kind == "image_encoder":
            kwargs["resolution"] = bid.resolution
        return _STUBS[bid.kind](**kwargs)

    client_kwargs: dict = {"timeout": bid.timeout, "max_in_flight": bid.max_in_flight, "transport": transport}
    if sleep is not None:
        client_kwargs["sleep"] = sleep
    client = HttpClient(bid.endpoint_or_path, **client_kwargs)
    if bid.kind == "mllm":
        return HttpMllm(client, bid.model_tag, temperature=bid.temperature, max_tokens=bid.max_tokens)
    if bid.kind == "text_encoder":
        return HttpTextEncoder(client, bid.model_tag, dim=bid.dim)
    if bid.kind == "image_encoder":
        return HttpImageEncoder(client, bid.model_tag, dim=bid.dim, resolution=bid.resolution)
    return HttpNounPhraseExtractor(client, bid.model_tag)


def wrap_cached(raw: Mapping[str, object], cache: ResponseCache) -> Backends:
    return Backends(**{k: _CACHED[k](raw[k], cache) for k in KINDS})


def build_backends(
    ids: Mapping[str, BackendId],
    cache: ResponseCache | str | Path | None = None,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] | None = None,
) -> Backends:
    """Resolve every backend kind and route all of them through the cache."""
    missing = [k for k in KINDS if k not in ids]
    if missing:
        raise ConfigError(f"no backend configured for {missing}")
    if not isinstance(cache, ResponseCache):
        cache = ResponseCache(cache if cache is not None else default_cache_dir())
    raw = {k: build_backend(ids[k], transport=transport, sleep=sleep) for k in KINDS}
    return wrap_cached(raw, cache)
