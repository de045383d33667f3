"""HTTP clients for OpenAI-style chat and embedding services."""

from __future__ import annotations

import base64
import io
import logging
import threading
import time
from pathlib import Path
from typing import Any, Callable

import httpx
import numpy as np
from PIL import Image

from ..errors import BackendUnavailable, BadResponse, EmptyText, Timeout
from ..masks import InstanceImage
from .base import Embedding, check_resolution
from .nounphrase import dedupe

log = logging.getLogger(__name__)

ATTEMPTS = 3
BACKOFF_START_S = 1.0
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_file_png(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw.startswith(PNG_MAGIC):
        return raw
    with Image.open(io.BytesIO(raw)) as im:
        return png_bytes(np.asarray(im.convert("RGB")))


class HttpClient:
    """POST with bounded concurrency and 3-attempt exponential backoff."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self.requests = 0

    def post_json(self, path: str, payload: dict) -> Any:
        url = f"{self.base_url}{path}"
        delay = BACKOFF_START_S
        last: Exception | None = None
        for attempt in range(1, ATTEMPTS + 1):
            try:
                with self._slots:
                    self.requests += 1
                    resp = self._client.post(url, json=payload)
            except httpx.TimeoutException as exc:
                last = Timeout(f"{url}: timed out")
                last.__cause__ = exc
            except httpx.TransportError as exc:
                last = BackendUnavailable(f"{url}: {exc}")
                last.__cause__ = exc
            else:
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = BackendUnavailable(f"{url}: HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise BadResponse(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise BadResponse(f"{url}: response is not JSON") from exc
            if attempt < ATTEMPTS:
                log.warning("%s (attempt %d/%d), retrying in %.0fs", last, attempt, ATTEMPTS, delay)
                self._sleep(delay)
                delay *= 2
        assert last is not None
        raise last

    def close(self) -> None:
        self._client.close()


class HttpMllm:
    kind = "mllm"

    def __init__(self, client: HttpClient, model_tag: str, temperature: float = 0.0, max_tokens: int = 256):
        self.client = client
        self.model_tag = model_tag
        self.temperature = temperature
        self.max_tokens = max_tokens

    def fingerprint(self) -> dict:
        return {
            "impl": "http",
            "model_tag": self.model_tag,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def generate(self, image_path: Path, prompt: str) -> str:
        data_url = "data:image/png;base64," + base64.b64encode(image_file_png(image_path)).decode("ascii")
        body = self.client.post_json(
            "/v1/chat/completions",
            {
                "model": self.model_tag,
                "messages": [
                    {
                        "role": "user",
                        "content": [
                            {"type": "text", "text": prompt},
                            {"type": "image_url", "image_url": {"url": data_url}},
                        ],
                    }
                ],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BadResponse("chat reply lacks choices[0].message.content") from exc
        if not isinstance(content, str):
            raise BadResponse("chat reply content is not a string")
        return content


class _HttpEncoder:
    def __init__(self, client: HttpClient, model_tag: str, dim: int | None = None):
        self.client = client
        self.model_tag = model_tag
        self.dim = dim

    def fingerprint(self) -> dict:
        return {"impl": "http", "model_tag": self.model_tag, "dim": self.dim}

    def _embed(self, value: str, modality: str) -> Embedding:
        body = self.client.post_json(
            "/v1/embeddings", {"model": self.model_tag, "input": value, "modality": modality}
        )
        if not isinstance(body, dict) or "embedding" not in body:
            raise BadResponse("embedding reply lacks 'embedding'")
        return Embedding.at_boundary(body["embedding"], self.dim)


class HttpTextEncoder(_HttpEncoder):
    kind = "text_encoder"

    def encode_text(self, text: str) -> Embedding:
        if not text:
            raise EmptyText("cannot encode empty text")
        return self._embed(text, "text")


class HttpImageEncoder(_HttpEncoder):
    kind = "image_encoder"

    def __init__(self, client: HttpClient, model_tag: str, dim: int | None = None, resolution: int = 224):
        super().__init__(client, model_tag, dim)
        self.resolution = resolution

    def fingerprint(self) -> dict:
        return {**super().fingerprint(), "resolution": self.resolution}

    def encode_image(self, img: InstanceImage) -> Embedding:
        check_resolution(img, self.resolution)
        return self._embed(base64.b64encode(png_bytes(img.pixels)).decode("ascii"), "image")


class HttpNounPhraseExtractor:
    """Chunker service: POST /v1/noun_phrases {text} -> {phrases: [...]}."""

    kind = "np_extractor"

    def __init__(self, client: HttpClient, model_tag: str):
        self.client = client
        self.model_tag = model_tag

    def fingerprint(self) -> dict:
        return {"impl": "http", "model_tag": self.model_tag}

    def extract(self, text: str) -> list[str]:
        if not text.strip():
            return []
        body = self.client.post_json("/v1/noun_phrases", {"model": self.model_tag, "text": text})
        phrases = body.get("phrases") if isinstance(body, dict) else None
        if not isinstance(phrases, list) or not all(isinstance(p, str) for p in phrases):
            raise BadResponse("noun-phrase reply lacks a 'phrases' string list")
        return dedupe([p.strip() for p in phrases])
