"""Normalized manifest and proposal-file loading.

``manifest.jsonl`` holds one record per line::

    {"v": 1, "sample_id": "...", "image_id": "...", "image_path": "images/x.png",
     "expression": "...", "split": "val",
     "gt_mask": {"width": W, "height": H, "counts": [...]}}

``proposals/<image_id>.json``::

    {"v": 1, "image_id": "...", "source_tag": "sam" | "dino_sam",
     "proposals": [{"image_id": "...", "proposal_id": "...",
                    "width": W, "height": H, "counts": [...]}, ...]}

Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import DatasetError, DimMismatch, EmptyProposalSet, MissingImage, NotFound, SchemaError
from .masks import RleCounts

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("val", "testA", "testB", "val_u", "test_u", "test_g")
SOURCE_TAGS = ("sam", "dino_sam")


@dataclass(frozen=True)
class RefSample:
    sample_id: str
    image_id: str
    image_path: Path
    expression: str
    gt_mask: RleCounts
    split: str

    def to_json(self, base_dir: Path | None = None) -> dict:
        path = self.image_path
        if base_dir is not None:
            try:
                path = path.relative_to(base_dir)
            except ValueError:
                pass
        return {
            "v": SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "image_path": str(path),
            "expression": self.expression,
            "split": self.split,
            "gt_mask": self.gt_mask.to_json(),
        }


@dataclass(frozen=True)
class ProposalSet:
    image_id: str
    proposals: tuple[RleCounts, ...]
    source_tag: str = "sam"
    proposal_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.proposals)

    def to_json(self) -> dict:
        ids = self.proposal_ids or tuple(str(i) for i in range(len(self.proposals)))
        return {
            "v": SCHEMA_VERSION,
            "image_id": self.image_id,
            "source_tag": self.source_tag,
            "proposals": [
                {"image_id": self.image_id, "proposal_id": pid, **r.to_json()}
                for pid, r in zip(ids, self.proposals)
            ],
        }


@dataclass
class LoadReport:
    count: int = 0
    errors: list[DatasetError] = field(default_factory=list)


def image_size(path: Path) -> tuple[int, int]:
    """(width, height) read from the image header."""
    if not path.is_file():
        raise MissingImage(f"image not found: {path}")
    with Image.open(path) as im:
        return im.size


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingImage(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _rle_from(d: dict, where: str) -> RleCounts:
    try:
        r = RleCounts.from_json(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: malformed mask record: {exc}") from exc
    problems = r.problems()
    if problems:
        raise SchemaError(f"{where}: {'; '.join(problems)}")
    return r


def parse_sample(rec: dict, base_dir: Path, where: str) -> RefSample:
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: record is not an object")
    if rec.get("v") != SCHEMA_VERSION:
        raise SchemaError(f"{where}: unsupported schema version {rec.get('v')!r}")
    try:
        sample_id = str(rec["sample_id"])
        expression = rec["expression"]
        image_rel = rec["image_path"]
        gt = rec["gt_mask"]
    except KeyError as exc:
        raise SchemaError(f"{where}: missing field {exc}") from None
    where = f"{where} (sample {sample_id})"
    if not isinstance(expression, str) or not expression.strip():
        err = SchemaError(f"{where}: expression must be non-empty text")
        err.sample_id = sample_id
        raise err
    split = rec.get("split", "val")
    if split not in SPLITS:
        raise SchemaError(f"{where}: unknown split {split!r}")
    image_path = Path(image_rel)
    if not image_path.is_absolute():
        image_path = base_dir / image_path
    gt_mask = _rle_from(gt, where)
    w, h = image_size(image_path)
    if (gt_mask.width, gt_mask.height) != (w, h):
        err = DimMismatch(f"{where}: gt mask is {gt_mask.width}x{gt_mask.height}, image is {w}x{h}")
        err.sample_id = sample_id
        raise err
    image_id = str(rec.get("image_id") or image_path.stem)
    return RefSample(sample_id, image_id, image_path, expression, gt_mask, split)


def load_dataset(
    manifest_path: str | Path,
    lenient: bool = False,
    report: LoadReport | None = None,
    split: str | None = None,
) -> Iterator[RefSample]:
    """Yield validated samples in manifest order.

    Bad records are fatal unless ``lenient``; in that case they are logged,
    appended to ``report.errors`` and skipped.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise NotFound(f"manifest not found: {manifest_path}")
    report = report if report is not None else LoadReport()
    base_dir = manifest_path.parent.resolve()
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{manifest_path.name}:{lineno}"
            try:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{where}: invalid JSON: {exc}") from exc
                sample = parse_sample(rec, base_dir, where)
            except DatasetError as exc:
                if not lenient:
                    raise
                log.warning("skipping record: %s", exc)
                report.errors.append(exc)
                continue
            if split is not None and sample.split != split:
                continue
            report.count += 1
            yield sample
    log.info("loaded %d samples from %s (%d skipped)", report.count, manifest_path, len(report.errors))


def write_manifest(samples: Iterable[RefSample], path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_json(base), ensure_ascii=False) + "\n")


def proposal_path(dir_path: str | Path, image_id: str) -> Path:
    return Path(dir_path) / f"{image_id}.json"


def load_proposals(dir_path: str | Path, image_id: str) -> ProposalSet:
    path = proposal_path(dir_path, image_id)
    if not path.is_file():
        raise NotFound(f"no proposal file for image {image_id!r} at {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict) or d.get("v") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version")
    source = d.get("source_tag", "sam")
    if source not in SOURCE_TAGS:
        raise SchemaError(f"{path}: unknown source_tag {source!r}")
    records = d.get("proposals")
    if not isinstance(records, list):
        raise SchemaError(f"{path}: 'proposals' must be a list")
    if not records:
        raise EmptyProposalSet(f"{path}: image {image_id!r} has no proposals")
    masks, ids = [], []
    for i, rec in enumerate(records):
        masks.append(_rle_from(rec, f"{path}[{i}]"))
        ids.append(str(rec.get("proposal_id", i)))
    dims = {(m.width, m.height) for m in masks}
    if len(dims) != 1:
        raise DimMismatch(f"{path}: proposals have differing dimensions {sorted(dims)}")
    return ProposalSet(str(d.get("image_id", image_id)), tuple(masks), source, tuple(ids))


def write_proposals(ps: ProposalSet, dir_path: str | Path) -> Path:
    path = proposal_path(dir_path, ps.image_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ps.to_json()), encoding="utf-8")
    return path
