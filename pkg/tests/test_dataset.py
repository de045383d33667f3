import json

import numpy as np
import pytest
from PIL import Image

from refseg.dataset import (
    LoadReport,
    ProposalSet,
    load_dataset,
    load_proposals,
    write_manifest,
    write_proposals,
)
from refseg.errors import DimMismatch, EmptyProposalSet, MissingImage, NotFound, SchemaError
from refseg.masks import BinaryMask, RleCounts, rle_encode


def make_image(path, w, h):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.zeros((h, w, 3), np.uint8)).save(path)


def record(sid, w=4, h=3, image="images/a.png", **over):
    rec = {
        "v": 1,
        "sample_id": sid,
        "image_id": "a",
        "image_path": image,
        "expression": f"thing {sid}",
        "split": "val",
        "gt_mask": {"width": w, "height": h, "counts": [w * h]},
    }
    rec.update(over)
    return rec


def write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")
    return path


@pytest.fixture
def root(tmp_path):
    make_image(tmp_path / "images" / "a.png", 4, 3)
    return tmp_path


class TestManifest:
    def test_empty(self, root):
        m = root / "m.jsonl"
        m.write_text("")
        assert list(load_dataset(m)) == []

    def test_three_in_order(self, root):
        m = write_lines(root / "m.jsonl", [record("s1"), record("s2"), record("s3")])
        samples = list(load_dataset(m))
        assert [s.sample_id for s in samples] == ["s1", "s2", "s3"]
        assert samples[0].image_path == (root / "images" / "a.png").resolve()
        assert samples[0].gt_mask == RleCounts(4, 3, (12,))

    def test_dim_mismatch_names_sample(self, root):
        m = write_lines(root / "m.jsonl", [record("s1"), record("bad_one", w=5, h=3)])
        with pytest.raises(DimMismatch) as ei:
            list(load_dataset(m))
        assert "bad_one" in str(ei.value)
        assert ei.value.sample_id == "bad_one"

    def test_lenient_skips_and_reports(self, root):
        recs = [record("s1"), record("s2", w=5), record("s3", image="images/missing.png"), record("s4")]
        m = write_lines(root / "m.jsonl", recs)
        with open(m, "a") as f:
            f.write("{not json\n")
        report = LoadReport()
        got = [s.sample_id for s in load_dataset(m, lenient=True, report=report)]
        assert got == ["s1", "s4"]
        assert len(report.errors) == 3
        assert report.count == 2

    @pytest.mark.parametrize(
        "over, exc",
        [
            ({"v": 2}, SchemaError),
            ({"expression": ""}, SchemaError),
            ({"split": "train"}, SchemaError),
            ({"gt_mask": {"width": 4, "height": 3, "counts": [5]}}, SchemaError),
            ({"image_path": "images/none.png"}, MissingImage),
        ],
    )
    def test_strict_errors(self, root, over, exc):
        m = write_lines(root / "m.jsonl", [record("s1", **over)])
        with pytest.raises(exc):
            list(load_dataset(m))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(NotFound):
            list(load_dataset(tmp_path / "none.jsonl"))

    def test_split_filter(self, root):
        m = write_lines(root / "m.jsonl", [record("s1"), record("s2", split="testA")])
        assert [s.sample_id for s in load_dataset(m, split="testA")] == ["s2"]

    def test_write_roundtrip(self, root):
        m = write_lines(root / "m.jsonl", [record("s1"), record("s2")])
        samples = list(load_dataset(m))
        out = root / "copy.jsonl"
        write_manifest(samples, out)
        assert list(load_dataset(out)) == samples
        assert json.loads(out.read_text().splitlines()[0])["image_path"] == "images/a.png"


def ps(*bits_list, image_id="a"):
    return ProposalSet(image_id, tuple(rle_encode(BinaryMask(np.array(b, bool))) for b in bits_list))


class TestProposals:
    def test_single(self, tmp_path):
        write_proposals(ps([[1, 0], [0, 0]]), tmp_path)
        got = load_proposals(tmp_path, "a")
        assert len(got) == 1
        assert got.source_tag == "sam"

    def test_duplicates_kept_in_order(self, tmp_path):
        a, b = [[1, 0], [0, 0]], [[0, 1], [1, 1]]
        write_proposals(ps(a, a, b), tmp_path)
        got = load_proposals(tmp_path, "a")
        assert len(got) == 3
        assert got.proposals[0] == got.proposals[1] != got.proposals[2]

    def test_missing(self, tmp_path):
        with pytest.raises(NotFound):
            load_proposals(tmp_path, "zzz")

    def test_empty(self, tmp_path):
        (tmp_path / "a.json").write_text(json.dumps({"v": 1, "image_id": "a", "proposals": []}))
        with pytest.raises(EmptyProposalSet):
            load_proposals(tmp_path, "a")

    def test_mixed_dims(self, tmp_path):
        write_proposals(ps([[1, 0]], [[1], [0]]), tmp_path)
        with pytest.raises(DimMismatch):
            load_proposals(tmp_path, "a")

    def test_bad_source_tag(self, tmp_path):
        d = ps([[1]]).to_json()
        d["source_tag"] = "other"
        (tmp_path / "a.json").write_text(json.dumps(d))
        with pytest.raises(SchemaError):
            load_proposals(tmp_path, "a")

    def test_dino_source_roundtrip(self, tmp_path):
        p = ProposalSet("a", ps([[1]]).proposals, "dino_sam", ("box0",))
        write_proposals(p, tmp_path)
        assert load_proposals(tmp_path, "a") == p
