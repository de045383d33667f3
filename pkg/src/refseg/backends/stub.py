"""Deterministic offline backends.

The hash stubs derive every output from sha256 of the canonical request and a
seed. Given a fixture table they become *planted* backends: listed inputs map
to listed outputs, everything else falls through to the hash stub.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import EmptyText, MissingEntry, SchemaError
from ..masks import InstanceImage
from .base import Embedding, canonical_json, check_resolution, file_sha256, sha256_hex
from .nounphrase import extract_noun_phrases

DEFAULT_REPLIES = {
    "attribute": [
        "A photo of person (standing in the foreground)",
        "A photo of object (with a distinctive color)",
        "A photo of animal (looking at the camera)",
        "A photo of vehicle (parked on the left)",
    ],
    "surrounding": [
        "A photo of person surrounded by (a table, two chairs and a lamp)",
        "A photo of object surrounded by (a wall and a floor)",
        "A photo of animal surrounded by (grass, a fence and a tree)",
        "A photo of vehicle surrounded by (a road, a building and a sign)",
    ],
}


def seeded_unit_vector(seed: int, model_tag: str, payload: object, dim: int) -> np.ndarray:
    digest = sha256_hex(canonical_json({"seed": seed, "model_tag": model_tag, "payload": payload}))
    rng = np.random.default_rng(int(digest[:32], 16))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def prompt_kind_of(prompt: str) -> str:
    return "surrounding" if "surrounded by (entities)" in prompt else "attribute"


@dataclass
class FixtureTable:
    """Designated request -> response table shared by planted and file backends.

    JSON layout (``"v": 1``)::

        {"v": 1, "dim": 8,
         "texts":  {"<text>": [floats]},
         "images": {"<instance image digest>": [floats]},
         "replies": [{"prompt": "...", "reply": "...", "image": "<file sha256, optional>"}],
         "noun_phrases": {"<text>": ["phrase", ...]}}
    """

    texts: dict[str, list[float]] = field(default_factory=dict)
    images: dict[str, list[float]] = field(default_factory=dict)
    replies: list[dict] = field(default_factory=list)
    noun_phrases: dict[str, list[str]] = field(default_factory=dict)
    dim: int | None = None
    digest: str = ""

    @classmethod
    def load(cls, path: str | Path) -> FixtureTable:
        with open(path, encoding="utf-8") as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
        if d.get("v") != 1:
            raise SchemaError(f"{path}: unsupported fixture version {d.get('v')!r}")
        return cls(
            texts=d.get("texts", {}),
            images=d.get("images", {}),
            replies=d.get("replies", []),
            noun_phrases=d.get("noun_phrases", {}),
            dim=d.get("dim"),
            digest=file_sha256(path),
        )

    def to_json(self) -> dict:
        out: dict = {"v": 1}
        if self.dim is not None:
            out["dim"] = self.dim
        out.update(texts=self.texts, images=self.images, replies=self.replies, noun_phrases=self.noun_phrases)
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    def reply_for(self, image_path: Path, prompt: str) -> str | None:
        image_sha = None
        for rec in self.replies:
            if rec["prompt"] != prompt:
                continue
            want = rec.get("image")
            if want is None:
                return rec["reply"]
            if image_sha is None:
                image_sha = file_sha256(image_path)
            if want == image_sha:
                return rec["reply"]
        return None


class _Base:
    def __init__(self, model_tag: str = "stub", seed: int = 0, table: FixtureTable | None = None, strict: bool = False):
        self.model_tag = model_tag
        self.seed = seed
        self.table = table
        self.strict = strict
        self.calls = 0

    def fingerprint(self) -> dict:
        fp = {"impl": "file" if self.strict else "stub", "model_tag": self.model_tag, "seed": self.seed}
        if self.table is not None:
            fp["fixture"] = self.table.digest
        return fp

    def _missing(self, what: str) -> MissingEntry:
        return MissingEntry(f"{self.kind}: no precomputed entry for {what}")


class StubMllm(_Base):
    kind = "mllm"

    def __init__(self, *args, replies: dict[str, list[str]] | None = None, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.replies = replies or DEFAULT_REPLIES

    def generate(self, image_path: Path, prompt: str) -> str:
        self.calls += 1
        if self.table is not None:
            hit = self.table.reply_for(Path(image_path), prompt)
            if hit is not None:
                return hit
            if self.strict:
                raise self._missing(f"prompt {prompt[:60]!r}")
        pool = self.replies[prompt_kind_of(prompt)]
        return pool[int(sha256_hex(prompt.encode()), 16) % len(pool)]


class StubTextEncoder(_Base):
    kind = "text_encoder"

    def __init__(self, *args, dim: int = 512, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.dim = self.table.dim if self.table is not None and self.table.dim else dim

    def fingerprint(self) -> dict:
        return {**super().fingerprint(), "dim": self.dim}

    def encode_text(self, text: str) -> Embedding:
        if not text:
            raise EmptyText("cannot encode empty text")
        self.calls += 1
        if self.table is not None:
            if text in self.table.texts:
                return Embedding.at_boundary(self.table.texts[text], self.dim)
            if self.strict:
                raise self._missing(f"text {text[:60]!r}")
        return Embedding(seeded_unit_vector(self.seed, self.model_tag, {"text": text}, self.dim))


class StubImageEncoder(_Base):
    kind = "image_encoder"

    def __init__(self, *args, dim: int = 512, resolution: int = 224, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.dim = self.table.dim if self.table is not None and self.table.dim else dim
        self.resolution = resolution

    def fingerprint(self) -> dict:
        return {**super().fingerprint(), "dim": self.dim, "resolution": self.resolution}

    def encode_image(self, img: InstanceImage) -> Embedding:
        check_resolution(img, self.resolution)
        self.calls += 1
        if self.table is not None:
            if img.digest in self.table.images:
                return Embedding.at_boundary(self.table.images[img.digest], self.dim)
            if self.strict:
                raise self._missing(f"image {img.digest[:12]}")
        payload = {"image": img.digest, "strategy_tag": img.strategy_tag}
        return Embedding(seeded_unit_vector(self.seed, self.model_tag, payload, self.dim))


class StubNounPhraseExtractor(_Base):
    kind = "np_extractor"

    def extract(self, text: str) -> list[str]:
        self.calls += 1
        if self.table is not None:
            if text in self.table.noun_phrases:
                return list(self.table.noun_phrases[text])
            if self.strict:
                raise self._missing(f"text {text[:60]!r}")
        return extract_noun_phrases(text)
