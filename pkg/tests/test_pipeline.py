import json
import math
from dataclasses import replace

import httpx
import numpy as np
import pytest
from PIL import Image

from refseg.backends import BackendId, FixtureTable, ResponseCache, build_backends, default_backend_ids
from refseg.dataset import ProposalSet, RefSample
from refseg.errors import BackendUnavailable, ConfigMismatch, EmptyAccumulator, RefSegError
from refseg.masks import BinaryMask, RenderConfig, render_mb, render_mc, rle_encode
from refseg.pipeline import Pipeline, PipelineConfig, load_results, run_sample
from refseg.prompts import PromptKind, build_prompt
from refseg.scoring import FusionWeights

RENDER = RenderConfig(encoder_resolution=16)
SIZE = 24
RECTS = ((1, 1, 8, 8), (12, 2, 20, 9), (3, 13, 21, 22))  # y0, x0, y1, x1


def three_masks():
    out = []
    for y0, x0, y1, x1 in RECTS:
        bits = np.zeros((SIZE, SIZE), bool)
        bits[y0 : y1 + 1, x0 : x1 + 1] = True
        out.append(BinaryMask(bits))
    return out


def basis(k, dim=4):
    v = [0.0] * dim
    v[k] = 1.0
    return v


@pytest.fixture
def scene(tmp_path):
    """One image with three rectangle proposals and a planted fixture table."""
    rng = np.random.default_rng(5)
    image = rng.integers(0, 256, (SIZE, SIZE, 3), dtype=np.uint8)
    path = tmp_path / "scene.png"
    Image.fromarray(image).save(path)
    masks = three_masks()
    expr = "the blue box"
    t_att = "A photo of box (painted blue)"
    table = FixtureTable(dim=4)
    for p, m in enumerate(masks):
        for img in (render_mb(image, m, RENDER), render_mc(image, m, RENDER)):
            table.images[img.digest] = basis(p)
    table.replies = [
        {"prompt": build_prompt(PromptKind.ATTRIBUTE, expr), "reply": t_att},
        {"prompt": build_prompt(PromptKind.SURROUNDING, expr), "reply": "A photo of box surrounded by ()"},
    ]
    # the vanilla text is equidistant from all three proposals; the attribute text is proposal 2
    table.texts[expr] = [1 / math.sqrt(3)] * 3 + [0.0]
    table.texts[t_att] = basis(2)
    table.texts["box"] = basis(3)
    fx = tmp_path / "fx.json"
    table.save(fx)
    sample = RefSample("s0", "scene", path, expr, rle_encode(masks[0]), "val")
    proposals = ProposalSet("scene", tuple(rle_encode(m) for m in masks))
    ids = {k: BackendId(k, "stub", str(fx), model_tag="planted", dim=4) for k in ("mllm", "text_encoder", "image_encoder")}
    ids["np_extractor"] = BackendId("np_extractor")
    return sample, proposals, ids


def config(ids, alpha=0.5, beta=1.0, **kw):
    return PipelineConfig(weights=FusionWeights(alpha, beta), render=RENDER, backend_ids=ids, **kw)


class TestRunSample:
    def test_single_proposal_always_selected(self, scene, tmp_path):
        sample, proposals, ids = scene
        one = ProposalSet("scene", proposals.proposals[1:2])
        backends = build_backends(config(ids).backend_ids, ResponseCache(tmp_path / "c"))
        res = run_sample(sample, one, config(ids), backends)
        assert res.selected == 0
        assert res.selected_proposal == proposals.proposals[1]

    def test_attribute_decides(self, scene, tmp_path):
        sample, proposals, ids = scene
        cfg = config(ids)
        res = run_sample(sample, proposals, cfg, build_backends(cfg.backend_ids, ResponseCache(tmp_path / "c")))
        assert res.selected == 2
        vans = [b.s_van for b in res.breakdowns]
        assert max(vans) - min(vans) < 1e-12
        assert [b.s_att for b in res.breakdowns] == [0.0, 0.0, 1.0]
        assert res.bundle.object_phrase == "box" and res.negatives == []

    def test_zero_alpha_picks_a_top_vanilla_score(self, scene, tmp_path):
        sample, proposals, ids = scene
        cfg = config(ids, alpha=0.0)
        res = run_sample(sample, proposals, cfg, build_backends(cfg.backend_ids, ResponseCache(tmp_path / "c")))
        # vanilla scores tie up to rounding, so the result must be one of the tied indices
        best = max(b.s_total for b in res.breakdowns)
        assert res.breakdowns[res.selected].s_total == best

    def test_backend_down_tagged_with_stage(self, scene, tmp_path):
        sample, proposals, ids = scene
        ids = {**ids, "mllm": BackendId("mllm", "http", "http://127.0.0.1:9", model_tag="m")}
        cfg = config(ids)

        def refuse(req):
            raise httpx.ConnectError("refused", request=req)

        backends = build_backends(cfg.backend_ids, ResponseCache(tmp_path / "c"),
                                  transport=httpx.MockTransport(refuse), sleep=lambda s: None)
        with pytest.raises(BackendUnavailable) as ei:
            run_sample(sample, proposals, cfg, backends)
        assert ei.value.stage == "mllm"
        assert ei.value.sample_id == "s0"
        assert "mllm" in str(ei.value)


def run(ds, out, cache, **over):
    cfg = PipelineConfig.load(ds.config)
    if over:
        cfg = replace(cfg, **over)
    pipe = Pipeline(cfg, cache=ResponseCache(cache))
    return pipe, pipe.run_split(ds.manifest, ds.proposals_dir, out)


class TestRunSplit:
    def test_planted_all_correct(self, planted, tmp_path):
        _, outcome = run(planted, tmp_path / "out", tmp_path / "cache")
        assert (outcome.oiou, outcome.miou) == (1.0, 1.0)
        assert {r.sample_id: r.selected for r in outcome.results} == planted.targets
        metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
        assert metrics["oIoU"] == 1.0 and metrics["n"] == 10

    def test_empty_split(self, tmp_path):
        m = tmp_path / "m.jsonl"
        m.write_text("")
        pipe = Pipeline(PipelineConfig(backend_ids=default_backend_ids()), cache=ResponseCache(tmp_path / "c"))
        with pytest.raises(EmptyAccumulator):
            pipe.run_split(m, tmp_path)

    def test_rerun_makes_no_backend_calls(self, planted, tmp_path):
        _, first = run(planted, tmp_path / "out", tmp_path / "cache")
        pipe, again = run(planted, tmp_path / "out", tmp_path / "cache")
        assert again.computed == 0
        assert (again.oiou, again.miou) == (first.oiou, first.miou)
        # a fresh run directory still hits the response cache for every request
        pipe2, fresh = run(planted, tmp_path / "out2", tmp_path / "cache")
        assert fresh.computed == 10
        for kind in ("mllm", "text_encoder", "image_encoder", "np_extractor"):
            assert pipe.backends.raw(kind).calls == 0
            assert pipe2.backends.raw(kind).calls == 0
        assert [r.deterministic_json() for r in fresh.results] == [r.deterministic_json() for r in first.results]

    def test_resume_after_interrupt(self, planted, tmp_path):
        _, reference = run(planted, tmp_path / "ref", tmp_path / "cache_ref")

        cfg = PipelineConfig.load(planted.config)
        pipe = Pipeline(cfg, cache=ResponseCache(tmp_path / "cache"))
        inner = pipe.backends.mllm.generate
        budget = {"calls": 0}

        def flaky(image_path, prompt):
            budget["calls"] += 1
            if budget["calls"] > 8:  # two prompts per sample: interrupt during sample 5
                raise KeyboardInterrupt
            return inner(image_path, prompt)

        pipe.backends.mllm.generate = flaky
        with pytest.raises(KeyboardInterrupt):
            pipe.run_split(planted.manifest, planted.proposals_dir, tmp_path / "out")
        assert len(load_results(tmp_path / "out")) == 4

        _, resumed = run(planted, tmp_path / "out", tmp_path / "cache")
        assert resumed.computed == 6
        assert (resumed.oiou, resumed.miou) == (reference.oiou, reference.miou)
        assert [r.deterministic_json() for r in resumed.results] == [r.deterministic_json() for r in reference.results]

    def test_worker_count_does_not_change_results(self, planted, tmp_path):
        _, one = run(planted, tmp_path / "w1", tmp_path / "c1", worker_limit=1)
        _, eight = run(planted, tmp_path / "w8", tmp_path / "c8", worker_limit=8)
        assert [r.deterministic_json() for r in one.results] == [r.deterministic_json() for r in eight.results]
        assert (one.oiou, one.miou) == (eight.oiou, eight.miou)

    def test_config_change_refused(self, planted, tmp_path):
        run(planted, tmp_path / "out", tmp_path / "cache")
        with pytest.raises(ConfigMismatch):
            run(planted, tmp_path / "out", tmp_path / "cache", weights=FusionWeights(0.2, 1.0))

    def test_worker_and_cache_location_do_not_change_digest(self, planted, tmp_path):
        cfg = PipelineConfig.load(planted.config)
        assert cfg.digest() == replace(cfg, worker_limit=4, cache_dir="/elsewhere").digest()
        assert cfg.digest() != replace(cfg, tau=0.5).digest()

    def test_lenient_skips_failed_samples(self, planted, tmp_path):
        # a manifest entry whose proposal file is missing
        samples = [json.loads(line) for line in planted.manifest.read_text().splitlines()]
        samples[0]["image_id"] = "nope"
        m = planted.root / "lenient_manifest.jsonl"
        m.write_text("".join(json.dumps(s) + "\n" for s in samples))
        cfg = PipelineConfig.load(planted.config)
        pipe = Pipeline(cfg, cache=ResponseCache(tmp_path / "cache"))
        with pytest.raises(RefSegError) as ei:
            pipe.run_split(m, planted.proposals_dir)
        assert ei.value.stage == "load"
        outcome = pipe.run_split(m, planted.proposals_dir, lenient=True)
        assert len(outcome.results) == 9 and list(outcome.failed) == ["s000"]
