"""Convert an upstream RefCOCO-family export into a normalized manifest.

Inputs are the ``refs(<partition>).p`` pickle and the COCO ``instances.json``
shipped with the refer toolkit. Polygon segmentations are rasterized with PIL
(edge pixels can differ from pycocotools);
uncompressed RLE segmentations are copied. Compressed RLE strings are not
supported.

Runnable standalone::

    python -m refseg.convert --refs refs(unc).p --instances instances.json \\
        --images-dir train2014 --out manifest.jsonl --split val
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import SCHEMA_VERSION, SPLITS
from .errors import SchemaError
from .masks import BinaryMask, RleCounts, rle_encode

# upstream split name -> normalized split name, per partition
SPLIT_MAPS = {
    "unc": {"val": "val", "testA": "testA", "testB": "testB"},
    "umd": {"val": "val_u", "test": "test_u"},
    "google": {"val": "test_g"},
}


def polygons_to_mask(polygons: list[list[float]], width: int, height: int) -> BinaryMask:
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        if len(poly) >= 6:
            draw.polygon([(poly[k], poly[k + 1]) for k in range(0, len(poly) - 1, 2)], fill=1, outline=1)
    return BinaryMask(np.asarray(canvas, dtype=bool))


def segmentation_to_rle(seg, width: int, height: int) -> RleCounts:
    if isinstance(seg, list):
        return rle_encode(polygons_to_mask(seg, width, height))
    if isinstance(seg, dict) and isinstance(seg.get("counts"), list):
        h, w = seg.get("size", [height, width])
        return RleCounts(int(w), int(h), tuple(seg["counts"]))
    raise SchemaError("compressed RLE segmentations are not supported; decode them upstream first")


def convert(
    refs_path: str | Path,
    instances_path: str | Path,
    images_dir: str | Path,
    out_path: str | Path,
    partition: str = "unc",
    split: str | None = None,
) -> int:
    """Write the manifest and return the number of samples written."""
    with open(refs_path, "rb") as f:
        refs = pickle.load(f)  # trusted local file from the refer toolkit
    coco = json.loads(Path(instances_path).read_text(encoding="utf-8"))
    images = {im["id"]: im for im in coco["images"]}
    anns = {a["id"]: a for a in coco["annotations"]}
    split_map = SPLIT_MAPS[partition]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base = out_path.parent.resolve()
    images_dir = Path(images_dir).resolve()

    n = 0
    with open(out_path, "w", encoding="utf-8") as out:
        for ref in refs:
            norm = split_map.get(ref["split"])
            if norm is None or norm not in SPLITS or (split is not None and norm != split):
                continue
            ann = anns[ref["ann_id"]]
            im = images[ref["image_id"]]
            rle = segmentation_to_rle(ann["segmentation"], im["width"], im["height"])
            path = images_dir / im["file_name"]
            try:
                rel = str(path.relative_to(base))
            except ValueError:
                rel = str(path)
            for sent in ref["sentences"]:
                rec = {
                    "v": SCHEMA_VERSION,
                    "sample_id": f"{ref['ref_id']}_{sent['sent_id']}",
                    "image_id": str(ref["image_id"]),
                    "image_path": rel,
                    "expression": sent.get("sent") or sent.get("raw", ""),
                    "split": norm,
                    "gt_mask": rle.to_json(),
                }
                out.write(json.dumps(rec, ensure_ascii=False) + "\n")
                n += 1
    return n


def add_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--refs", required=True, help="refs(<partition>).p pickle")
    p.add_argument("--instances", required=True, help="COCO instances.json")
    p.add_argument("--images-dir", required=True, help="directory holding the COCO images")
    p.add_argument("--out", required=True, help="manifest.jsonl to write")
    p.add_argument("--partition", choices=sorted(SPLIT_MAPS), default="unc")
    p.add_argument("--split", choices=SPLITS, default=None, help="keep only this normalized split")


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="refseg-convert", description=__doc__.splitlines()[0])
    add_arguments(p)
    a = p.parse_args(argv)
    n = convert(a.refs, a.instances, a.images_dir, a.out, a.partition, a.split)
    print(json.dumps({"samples": n, "manifest": a.out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
