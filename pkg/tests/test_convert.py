import json
import pickle

import numpy as np
import pytest
from PIL import Image

from refseg.convert import convert, main, polygons_to_mask, segmentation_to_rle
from refseg.dataset import load_dataset
from refseg.errors import SchemaError
from refseg.masks import rle_decode


def test_polygon_rectangle_includes_edges():
    m = polygons_to_mask([[2, 2, 5, 2, 5, 4, 2, 4]], 8, 6)
    expected = np.zeros((6, 8), bool)
    expected[2:5, 2:6] = True
    assert np.array_equal(m.bits, expected)


def test_uncompressed_rle_copied():
    r = segmentation_to_rle({"size": [2, 3], "counts": [2, 3, 1]}, 3, 2)
    assert (r.width, r.height, r.counts) == (3, 2, (2, 3, 1))


def test_compressed_rle_rejected():
    with pytest.raises(SchemaError):
        segmentation_to_rle({"size": [2, 3], "counts": "abc"}, 3, 2)


@pytest.fixture
def export(tmp_path):
    images = tmp_path / "coco"
    images.mkdir()
    Image.fromarray(np.zeros((6, 8, 3), np.uint8)).save(images / "a.png")
    coco = {
        "images": [{"id": 7, "file_name": "a.png", "width": 8, "height": 6}],
        "annotations": [{"id": 70, "image_id": 7, "segmentation": [[2, 2, 5, 2, 5, 4, 2, 4]]}],
    }
    (tmp_path / "instances.json").write_text(json.dumps(coco))
    refs = [
        {"ref_id": 1, "ann_id": 70, "image_id": 7, "split": "val",
         "sentences": [{"sent_id": 10, "sent": "left box"}, {"sent_id": 11, "sent": "the box"}]},
        {"ref_id": 2, "ann_id": 70, "image_id": 7, "split": "train", "sentences": [{"sent_id": 12, "sent": "x"}]},
        {"ref_id": 3, "ann_id": 70, "image_id": 7, "split": "testA", "sentences": [{"sent_id": 13, "sent": "y"}]},
    ]
    with open(tmp_path / "refs(unc).p", "wb") as f:
        pickle.dump(refs, f)
    return tmp_path


def test_convert_unc(export):
    out = export / "data" / "manifest.jsonl"
    n = convert(export / "refs(unc).p", export / "instances.json", export / "coco", out, "unc")
    assert n == 3
    samples = list(load_dataset(out))
    assert [s.sample_id for s in samples] == ["1_10", "1_11", "3_13"]
    assert [s.split for s in samples] == ["val", "val", "testA"]
    assert rle_decode(samples[0].gt_mask).area() == 12
    assert samples[0].image_id == "7"


def test_convert_split_filter_and_cli(export, capsys):
    out = export / "m.jsonl"
    code = main(["--refs", str(export / "refs(unc).p"), "--instances", str(export / "instances.json"),
                 "--images-dir", str(export / "coco"), "--out", str(out), "--split", "testA"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["samples"] == 1
    assert [s.split for s in load_dataset(out)] == ["testA"]


def test_convert_google_maps_val_to_test_g(export):
    out = export / "g.jsonl"
    assert convert(export / "refs(unc).p", export / "instances.json", export / "coco", out, "google") == 2
    assert {s.split for s in load_dataset(out)} == {"test_g"}
