from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np
from numpy.typing import NDArray

from ..errors import BadResolution, BadResponse, ConfigError
from ..masks import InstanceImage

KINDS = ("mllm", "text_encoder", "image_encoder", "np_extractor")
IMPLS = ("http", "file", "stub")


class Embedding:
    """Finite, non-zero feature vector."""

    __slots__ = ("_values",)

    def __init__(self, values: Sequence[float] | NDArray) -> None:
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size == 0:
            raise ValueError("embedding is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding has non-finite entries")
        if not np.any(arr):
            raise ValueError("embedding is all-zero")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def at_boundary(cls, values: Any, dim: int | None = None) -> Embedding:
        """Validate a backend response, mapping violations to BadResponse."""
        try:
            emb = cls(values)
        except (ValueError, TypeError) as exc:
            raise BadResponse(f"invalid embedding: {exc}") from exc
        if dim is not None and emb.dim != dim:
            raise BadResponse(f"embedding dim {emb.dim} != expected {dim}")
        return emb

    @property
    def values(self) -> NDArray[np.float64]:
        return self._values

    @property
    def dim(self) -> int:
        return int(self._values.size)

    def tolist(self) -> list[float]:
        return self._values.tolist()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return bool(np.array_equal(self._values, other._values))

    def __hash__(self) -> int:
        return hash(self._values.tobytes())

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim})"


@dataclass(frozen=True)
class BackendId:
    kind: str
    impl: str = "stub"
    endpoint_or_path: str | None = None
    model_tag: str = "stub"
    seed: int = 0
    dim: int = 512
    resolution: int = 224
    timeout: float = 60.0
    max_in_flight: int = 4
    temperature: float = 0.0
    max_tokens: int = 256

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.impl not in IMPLS:
            raise ConfigError(f"unknown backend impl {self.impl!r}")
        if self.impl == "http" and not self.endpoint_or_path:
            raise ConfigError(f"{self.kind}: http backend requires an endpoint")
        if self.impl == "file" and not self.endpoint_or_path:
            raise ConfigError(f"{self.kind}: file backend requires a path")
        if self.dim < 1 or self.max_in_flight < 1:
            raise ConfigError(f"{self.kind}: dim and max_in_flight must be >= 1")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "impl": self.impl,
            "endpoint_or_path": self.endpoint_or_path,
            "model_tag": self.model_tag,
            "seed": self.seed,
            "dim": self.dim,
            "resolution": self.resolution,
            "timeout": self.timeout,
            "max_in_flight": self.max_in_flight,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_json(cls, kind: str, d: dict, base_dir: Path | None = None) -> BackendId:
        d = dict(d)
        d.pop("kind", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{kind}: unknown backend fields {sorted(unknown)}")
        loc = d.get("endpoint_or_path")
        if loc and d.get("impl") in ("file", "stub") and base_dir is not None:
            p = Path(loc)
            if not p.is_absolute():
                d["endpoint_or_path"] = str((base_dir / p).resolve())
        return cls(kind=kind, **d)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@runtime_checkable
class MllmBackend(Protocol):
    kind: str

    def fingerprint(self) -> dict: ...

    def generate(self, image_path: Path, prompt: str) -> str: ...


@runtime_checkable
class TextEncoder(Protocol):
    kind: str

    def fingerprint(self) -> dict: ...

    def encode_text(self, text: str) -> Embedding: ...


@runtime_checkable
class ImageEncoder(Protocol):
    kind: str
    resolution: int

    def fingerprint(self) -> dict: ...

    def encode_image(self, img: InstanceImage) -> Embedding: ...


@runtime_checkable
class NounPhraseExtractor(Protocol):
    kind: str

    def fingerprint(self) -> dict: ...

    def extract(self, text: str) -> list[str]: ...


@dataclass
class Backends:
    mllm: MllmBackend
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    np_extractor: NounPhraseExtractor

    def raw(self, kind: str):
        """The uncached backend behind a cache wrapper."""
        b = getattr(self, kind)
        return getattr(b, "inner", b)


def check_resolution(img: InstanceImage, resolution: int) -> None:
    if img.resolution != (resolution, resolution):
        raise BadResolution(f"image is {img.resolution}, encoder expects {resolution}x{resolution}")

