"""Synthetic datasets with planted backends whose winning proposal is known.

Each image holds three disjoint rectangles, which are also the proposals. The
ground truth is the target rectangle. Every rendered proposal image maps to a
basis vector ``e_p`` and every text maps to a vector whose components on
``e_0..e_2`` are exactly the cosines we want, so each score is set by hand.

Sample kinds (cosines listed as target / distractor / neutral proposal):

``A``  vanilla score alone already picks the target.
``B``  vanilla prefers the distractor; the attribute score fixes it.
``C``  vanilla prefers the distractor; the surrounding penalty fixes it.
``D``  only attribute and surrounding scores together overturn vanilla.
``N``  attribute cosines are uniform, so the pick never depends on alpha.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backends.stub import FixtureTable
from .dataset import ProposalSet, RefSample, write_manifest, write_proposals
from .masks import BinaryMask, RenderConfig, render_mb, render_mc, rle_encode
from .prompts import PromptKind, build_prompt

DIM = 8
SIZE = 32
OBJECT_AXIS = 6
REST_AXIS = 7

# (van, att, negatives) with each triple ordered target, distractor, neutral
KINDS = {
    "A": ((0.6, 0.2, 0.1), (0.5, 0.3, 0.0), [(0.0, 0.2, 0.0)]),
    "B": ((0.4, 0.5, 0.0), (0.7, 0.1, 0.0), []),
    "C": ((0.4, 0.5, 0.0), (0.2, 0.2, 0.0), [(0.0, 0.4, 0.0)]),
    "D": ((0.3, 0.6, 0.0), (0.6, 0.2, 0.0), [(0.0, 0.25, 0.0)]),
    "N": ((0.5, 0.3, 0.1), (0.3, 0.3, 0.3), [(0.0, 0.2, 0.0)]),
}
DEFAULT_KINDS = "ABCDABCDAD"

RECTS = ((2, 2, 11, 13), (16, 3, 29, 12), (4, 17, 27, 29))  # y0, x0, y1, x1 inclusive
OBJECTS = ("man", "dog", "car", "cup", "bird", "chair", "horse", "bus", "plate", "kite", "boat", "vase")
CLUTTER = ("lamp", "table", "tree", "fence", "sofa", "sign", "wall", "rug", "shelf", "pole", "bench", "door")

PLANTED_RENDER = RenderConfig(encoder_resolution=SIZE)


def _text_vector(cos_by_proposal: dict[int, float]) -> list[float]:
    v = np.zeros(DIM)
    for p, c in cos_by_proposal.items():
        v[p] = c
    rest = 1.0 - float(np.dot(v, v))
    if rest < 0:
        raise ValueError("requested cosines do not fit on a unit vector")
    v[REST_AXIS] = math.sqrt(rest)
    return v.tolist()


def _basis(axis: int) -> list[float]:
    v = [0.0] * DIM
    v[axis] = 1.0
    return v


@dataclass
class PlantedDataset:
    root: Path
    manifest: Path
    proposals_dir: Path
    fixture: Path
    config: Path
    targets: dict[str, int] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)


def build_planted_dataset(
    root: str | Path,
    kinds: str = DEFAULT_KINDS,
    alpha: float = 0.5,
    beta: float = 1.0,
    render: RenderConfig = PLANTED_RENDER,
) -> PlantedDataset:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    proposals_dir = root / "proposals"
    table = FixtureTable(dim=DIM)
    samples, targets, kind_of = [], {}, {}

    for i, kind in enumerate(kinds):
        van, att, negs = KINDS[kind]
        rng = np.random.default_rng(1000 + i)
        image = np.empty((SIZE, SIZE, 3), dtype=np.uint8)
        image[:] = rng.integers(0, 256, size=3)
        masks = []
        for y0, x0, y1, x1 in RECTS:
            image[y0 : y1 + 1, x0 : x1 + 1] = rng.integers(0, 256, size=3)
            bits = np.zeros((SIZE, SIZE), dtype=bool)
            bits[y0 : y1 + 1, x0 : x1 + 1] = True
            masks.append(BinaryMask(bits))
        image_id = f"img{i:03d}"
        image_path = root / "images" / f"{image_id}.png"
        Image.fromarray(image, "RGB").save(image_path)

        target = i % 3
        order = (target, (target + 1) % 3, (target + 2) % 3)  # target, distractor, neutral

        for p, m in enumerate(masks):
            for img in (render_mb(image, m, render), render_mc(image, m, render)):
                table.images[img.digest] = _basis(p)

        obj = OBJECTS[i % len(OBJECTS)]
        expression = f"the {obj} in picture {i}"
        t_att = f"A photo of {obj} (with planted attribute {i})"
        neg_phrases = [f"{CLUTTER[(i + k) % len(CLUTTER)]} {i}" for k in range(len(negs))]
        synonym = f"{obj} figure {i}"
        entities = [f"a {n}" for n in neg_phrases] + [f"a {synonym}", f"picture {i}"]
        t_sur = f"A photo of {obj} surrounded by ({', '.join(entities)})"

        table.replies.append({"prompt": build_prompt(PromptKind.ATTRIBUTE, expression), "reply": t_att})
        table.replies.append({"prompt": build_prompt(PromptKind.SURROUNDING, expression), "reply": t_sur})
        table.texts[expression] = _text_vector({order[k]: van[k] for k in range(3)})
        table.texts[t_att] = _text_vector({order[k]: att[k] for k in range(3)})
        table.texts[obj] = _basis(OBJECT_AXIS)
        table.texts[synonym] = _basis(OBJECT_AXIS)
        for phrase, cos in zip(neg_phrases, negs):
            table.texts[phrase] = _text_vector({order[k]: cos[k] for k in range(3)})

        sample_id = f"s{i:03d}"
        samples.append(
            RefSample(sample_id, image_id, image_path.resolve(), expression, rle_encode(masks[target]), "val")
        )
        write_proposals(ProposalSet(image_id, tuple(rle_encode(m) for m in masks), "sam"), proposals_dir)
        targets[sample_id] = target
        kind_of[sample_id] = kind

    manifest = root / "manifest.jsonl"
    write_manifest(samples, manifest)
    fixture = root / "fixture.json"
    table.save(fixture)
    config = root / "config.json"
    planted = {"impl": "stub", "endpoint_or_path": fixture.name, "model_tag": "planted", "dim": DIM}
    config.write_text(
        json.dumps(
            {
                "dataset_tag": "refcoco",
                "weights": {"alpha": alpha, "beta": beta},
                "render": render.to_json(),
                "backends": {
                    "mllm": planted,
                    "text_encoder": planted,
                    "image_encoder": planted,
                    "np_extractor": {"impl": "stub", "model_tag": "baseline"},
                },
            },
            indent=1,
        ),
        encoding="utf-8",
    )
    return PlantedDataset(root, manifest, proposals_dir, fixture, config, targets, kind_of)
