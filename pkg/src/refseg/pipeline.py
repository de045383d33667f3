"""End-to-end orchestration over a split, with resumable per-sample results."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
import urllib.parse
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

from .backends import KINDS, BackendId, Backends, ResponseCache, build_backends, default_cache_dir
from .backends.base import canonical_json, file_sha256, sha256_hex
from .dataset import ProposalSet, RefSample, load_dataset, load_image, load_proposals
from .errors import (
    ConfigError,
    ConfigMismatch,
    DimMismatch,
    EmptyAccumulator,
    EmptyProposalSet,
    RefSegError,
)
from .evaluation import MetricAccumulator, ScoredSample, overlaps_against
from .masks import RenderConfig, RleCounts, render_mb, render_mc, rle_decode
from .prompts import DescriptionBundle, PromptKind, build_prompt
from .scoring import (
    DEFAULT_TAU,
    FusionWeights,
    ScoreBreakdown,
    filter_negatives,
    fuse_visual,
    score_proposal,
    select_mask,
)

log = logging.getLogger(__name__)

DATASET_TAGS = ("refcoco", "refcoco+", "refcocog")


@dataclass(frozen=True)
class PipelineConfig:
    weights: FusionWeights = field(default_factory=lambda: FusionWeights.for_dataset("refcoco"))
    render: RenderConfig = field(default_factory=RenderConfig)
    tau: float = DEFAULT_TAU
    normalize_first: bool = True
    backend_ids: dict[str, BackendId] = field(default_factory=dict)
    worker_limit: int = 1
    dataset_tag: str = "refcoco"
    cache_dir: str | None = None

    def __post_init__(self) -> None:
        if self.worker_limit < 1:
            raise ConfigError("worker_limit must be >= 1")
        if self.dataset_tag not in DATASET_TAGS:
            raise ConfigError(f"dataset_tag must be one of {DATASET_TAGS}")
        if not -1.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [-1, 1]")
        ids = {k: BackendId(kind=k) for k in KINDS}
        ids.update(self.backend_ids)
        # the image encoder always consumes renders at the configured resolution
        ids["image_encoder"] = replace(ids["image_encoder"], resolution=self.render.encoder_resolution)
        object.__setattr__(self, "backend_ids", ids)

    @classmethod
    def from_json(cls, d: dict, base_dir: Path | None = None) -> PipelineConfig:
        known = {"weights", "render", "tau", "normalize_first", "backends", "worker_limit", "dataset_tag", "cache_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        tag = d.get("dataset_tag", "refcoco")
        if tag not in DATASET_TAGS:
            raise ConfigError(f"dataset_tag must be one of {DATASET_TAGS}")
        try:
            default = FusionWeights.for_dataset(tag)
            wd = d.get("weights", {})
            weights = FusionWeights(wd.get("alpha", default.alpha), wd.get("beta", default.beta))
            render = RenderConfig(**d.get("render", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        backends = {k: BackendId.from_json(k, v, base_dir) for k, v in d.get("backends", {}).items()}
        return cls(
            weights=weights,
            render=render,
            tau=float(d.get("tau", DEFAULT_TAU)),
            normalize_first=bool(d.get("normalize_first", True)),
            backend_ids=backends,
            worker_limit=int(d.get("worker_limit", 1)),
            dataset_tag=tag,
            cache_dir=d.get("cache_dir"),
        )

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(d, path.parent.resolve())

    def to_json(self) -> dict:
        return {
            "dataset_tag": self.dataset_tag,
            "weights": self.weights.to_json(),
            "tau": self.tau,
            "normalize_first": self.normalize_first,
            "render": self.render.to_json(),
            "worker_limit": self.worker_limit,
            "cache_dir": self.cache_dir,
            "backends": {k: self.backend_ids[k].to_json() for k in KINDS},
        }

    def digest(self) -> str:
        """Hash of everything that can change a result (not workers or cache location)."""
        d = self.to_json()
        d.pop("worker_limit")
        d.pop("cache_dir")
        for k, bid in self.backend_ids.items():
            loc = bid.endpoint_or_path
            if bid.impl != "http" and loc and Path(loc).is_file():
                d["backends"][k]["content_sha256"] = file_sha256(loc)
        return sha256_hex(canonical_json(d))


@dataclass
class SampleResult:
    sample_id: str
    image_id: str
    image_path: str
    config_digest: str
    weights: FusionWeights
    selected: int
    selected_proposal: RleCounts
    gt_mask: RleCounts
    breakdowns: list[ScoreBreakdown]
    overlaps: list[tuple[int, int]]
    bundle: DescriptionBundle
    negatives: list[str]
    proposal_source: str
    timing: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "image_path": self.image_path,
            "config_digest": self.config_digest,
            "weights": self.weights.to_json(),
            "breakdowns": [b.to_json() for b in self.breakdowns],
            "selected": self.selected,
            "selected_proposal": self.selected_proposal.to_json(),
            "gt_mask": self.gt_mask.to_json(),
            "overlaps": [list(o) for o in self.overlaps],
            "description_bundle": self.bundle.to_json(),
            "negatives": list(self.negatives),
            "proposal_source": self.proposal_source,
            "timing": self.timing,
        }

    @classmethod
    def from_json(cls, d: dict) -> SampleResult:
        return cls(
            sample_id=d["sample_id"],
            image_id=d["image_id"],
            image_path=d["image_path"],
            config_digest=d["config_digest"],
            weights=FusionWeights(**d["weights"]),
            selected=int(d["selected"]),
            selected_proposal=RleCounts.from_json(d["selected_proposal"]),
            gt_mask=RleCounts.from_json(d["gt_mask"]),
            breakdowns=[ScoreBreakdown.from_json(b) for b in d["breakdowns"]],
            overlaps=[(int(i), int(u)) for i, u in d["overlaps"]],
            bundle=DescriptionBundle.from_json(d["description_bundle"]),
            negatives=list(d.get("negatives", [])),
            proposal_source=d.get("proposal_source", "sam"),
            timing=d.get("timing", {}),
        )

    def scored(self) -> ScoredSample:
        return ScoredSample(self.sample_id, self.breakdowns, self.overlaps)

    def deterministic_json(self) -> dict:
        d = self.to_json()
        d.pop("timing")
        return d


@contextmanager
def _stage(name: str, sample_id: str, timing: dict[str, float]) -> Iterator[None]:
    t0 = time.perf_counter()
    try:
        yield
    except RefSegError as exc:
        if exc.stage is None:
            exc.stage = name
        exc.sample_id = sample_id
        raise
    finally:
        timing[name] = timing.get(name, 0.0) + time.perf_counter() - t0


def result_path(out_dir: Path, sample_id: str) -> Path:
    return out_dir / "samples" / f"{urllib.parse.quote(sample_id, safe='')}.json"


def atomic_write_json(path: Path, obj: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=1)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclass
class RunOutcome:
    oiou: float
    miou: float
    results: list[SampleResult]
    failed: dict[str, str] = field(default_factory=dict)
    computed: int = 0

    def metrics_json(self) -> dict:
        return {"oIoU": self.oiou, "mIoU": self.miou, "n": len(self.results), "failed": len(self.failed)}


class Pipeline:
    def __init__(self, cfg: PipelineConfig, backends: Backends | None = None, cache: ResponseCache | None = None):
        self.cfg = cfg
        if backends is None:
            cache = cache or ResponseCache(cfg.cache_dir or default_cache_dir())
            backends = build_backends(cfg.backend_ids, cache)
        self.backends = backends
        self.config_digest = cfg.digest()

    # ------------------------------------------------------------ one sample

    def describe(self, sample: RefSample, timing: dict[str, float]) -> DescriptionBundle:
        sid = sample.sample_id
        with _stage("prompts", sid, timing):
            p_att = build_prompt(PromptKind.ATTRIBUTE, sample.expression)
            p_sur = build_prompt(PromptKind.SURROUNDING, sample.expression)
        with _stage("mllm", sid, timing):
            t_att = self.backends.mllm.generate(sample.image_path, p_att)
            t_sur = self.backends.mllm.generate(sample.image_path, p_sur)
        with _stage("parse", sid, timing):
            bundle = DescriptionBundle.from_replies(sample.expression, t_att, t_sur)
        if bundle.att_fallback or bundle.sur_fallback:
            log.info("sample %s: description did not follow the template (att=%s, sur=%s)",
                     sid, bundle.att_fallback, bundle.sur_fallback)
        for text in (t_att, t_sur):
            if len(text) > 300:
                log.warning("sample %s: description of %d characters may be truncated by the encoder", sid, len(text))
        return bundle

    def run_sample(self, sample: RefSample, proposals: ProposalSet) -> SampleResult:
        cfg, be, sid = self.cfg, self.backends, sample.sample_id
        timing: dict[str, float] = {}
        with _stage("load", sid, timing):
            if len(proposals) == 0:
                raise EmptyProposalSet(f"image {proposals.image_id!r} has no proposals")
            image = load_image(sample.image_path)
            h, w = image.shape[:2]
            for i, p in enumerate(proposals.proposals):
                if (p.width, p.height) != (w, h):
                    raise DimMismatch(f"proposal {i} is {p.width}x{p.height}, image is {w}x{h}")
            masks = [rle_decode(p) for p in proposals.proposals]

        bundle = self.describe(sample, timing)

        with _stage("text_encode", sid, timing):
            f_att = be.text_encoder.encode_text(bundle.t_att)
            f_van = be.text_encoder.encode_text(bundle.t_van)
        with _stage("negatives", sid, timing):
            candidates = be.np_extractor.extract(bundle.t_sur)
            negs = filter_negatives(candidates, bundle.object_phrase, bundle.t_van, cfg.tau, be.text_encoder)

        breakdowns = []
        for i, m in enumerate(masks):
            with _stage("render", sid, timing):
                mb = render_mb(image, m, cfg.render)
                mc = render_mc(image, m, cfg.render)
            with _stage("image_encode", sid, timing):
                f_mb = be.image_encoder.encode_image(mb)
                f_mc = be.image_encoder.encode_image(mc)
            with _stage("score", sid, timing):
                f_i = fuse_visual(f_mb, f_mc, cfg.normalize_first)
                breakdowns.append(score_proposal(f_i, f_att, f_van, negs, cfg.weights, proposal_index=i))

        with _stage("select", sid, timing):
            selected = select_mask(breakdowns)
            overlaps = overlaps_against(sample.gt_mask, proposals.proposals)

        return SampleResult(
            sample_id=sid,
            image_id=sample.image_id,
            image_path=str(sample.image_path),
            config_digest=self.config_digest,
            weights=cfg.weights,
            selected=selected,
            selected_proposal=proposals.proposals[selected],
            gt_mask=sample.gt_mask,
            breakdowns=breakdowns,
            overlaps=overlaps,
            bundle=bundle,
            negatives=list(negs.phrases),
            proposal_source=proposals.source_tag,
            timing=timing,
        )

    def run_one(self, sample: RefSample, proposals_dir: str | Path) -> SampleResult:
        try:
            proposals = load_proposals(proposals_dir, sample.image_id)
        except RefSegError as exc:
            exc.sample_id, exc.stage = sample.sample_id, "load"
            raise
        return self.run_sample(sample, proposals)

    # ------------------------------------------------------------- a split

    def _check_run_config(self, out_dir: Path, manifest: Path, proposals_dir: Path) -> None:
        path = out_dir / "run_config.json"
        if path.exists():
            prev = json.loads(path.read_text(encoding="utf-8"))
            if prev.get("config_digest") != self.config_digest:
                raise ConfigMismatch(
                    f"{out_dir} holds results for config {prev.get('config_digest', '?')[:12]}, "
                    f"current config is {self.config_digest[:12]}; use a fresh output directory"
                )
        atomic_write_json(
            path,
            {
                "config_digest": self.config_digest,
                "config": self.cfg.to_json(),
                "manifest": str(manifest),
                "proposals": str(proposals_dir),
            },
        )

    def _load_existing(self, out_dir: Path, sample_id: str) -> SampleResult | None:
        path = result_path(out_dir, sample_id)
        if not path.exists():
            return None
        res = SampleResult.from_json(json.loads(path.read_text(encoding="utf-8")))
        if res.config_digest != self.config_digest or res.sample_id != sample_id:
            raise ConfigMismatch(f"{path} was produced under a different configuration")
        return res

    def run_split(
        self,
        manifest: str | Path,
        proposals_dir: str | Path,
        out_dir: str | Path | None = None,
        lenient: bool = False,
    ) -> RunOutcome:
        """Score every sample, persisting each result as soon as it is done.

        With ``out_dir`` set the run resumes: samples whose result file exists
        under the same config digest are loaded instead of recomputed.
        """
        manifest, proposals_dir = Path(manifest), Path(proposals_dir)
        try:
            samples = list(load_dataset(manifest, lenient=lenient))
        except RefSegError as exc:
            exc.stage = exc.stage or "load"
            raise
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            self._check_run_config(out, manifest.resolve(), proposals_dir.resolve())

        done: dict[str, SampleResult] = {}
        pending: list[RefSample] = []
        for s in samples:
            prev = self._load_existing(out, s.sample_id) if out is not None else None
            if prev is not None:
                done[s.sample_id] = prev
            else:
                pending.append(s)
        if done:
            log.info("resuming: %d of %d samples already complete", len(done), len(samples))

        failed: dict[str, str] = {}

        def work(s: RefSample) -> SampleResult:
            res = self.run_one(s, proposals_dir)
            if out is not None:
                atomic_write_json(result_path(out, s.sample_id), res.to_json())
            return res

        computed = 0
        pool = ThreadPoolExecutor(max_workers=self.cfg.worker_limit, thread_name_prefix="refseg")
        try:
            futures = {pool.submit(work, s): s for s in pending}
            remaining = set(futures)
            while remaining:
                finished, remaining = wait(remaining, return_when=FIRST_EXCEPTION)
                for fut in finished:
                    s = futures[fut]
                    exc = fut.exception()
                    if exc is None:
                        done[s.sample_id] = fut.result()
                        computed += 1
                    elif lenient and isinstance(exc, RefSegError):
                        log.error("sample %s failed: %s", s.sample_id, exc)
                        failed[s.sample_id] = str(exc)
                    else:
                        for f in remaining:
                            f.cancel()
                        raise exc
        finally:
            pool.shutdown(wait=True, cancel_futures=True)

        results = [done[s.sample_id] for s in samples if s.sample_id in done]
        if not results:
            raise EmptyAccumulator("no samples were scored")
        oiou, miou = metrics_from_results(results)
        outcome = RunOutcome(oiou, miou, results, failed, computed)
        if out is not None:
            metrics = {**outcome.metrics_json(), "config_digest": self.config_digest, "failed_samples": failed}
            atomic_write_json(out / "metrics.json", metrics)
        return outcome

    def score_split(
        self, manifest: str | Path, proposals_dir: str | Path, out_dir: str | Path | None = None, lenient: bool = False
    ) -> list[ScoredSample]:
        return [r.scored() for r in self.run_split(manifest, proposals_dir, out_dir, lenient).results]


def metrics_from_results(results: Sequence[SampleResult]) -> tuple[float, float]:
    acc = MetricAccumulator()
    for r in results:
        acc.accumulate(rle_decode(r.selected_proposal), rle_decode(r.gt_mask))
    return acc.finalize()


def load_results(run_dir: str | Path) -> list[SampleResult]:
    """Every persisted sample result under ``run_dir``, ordered by sample id."""
    sample_dir = Path(run_dir) / "samples"
    out = [
        SampleResult.from_json(json.loads(p.read_text(encoding="utf-8")))
        for p in sample_dir.glob("*.json")
        if not p.name.startswith(".tmp-")
    ]
    return sorted(out, key=lambda r: r.sample_id)


def run_sample(sample: RefSample, proposals: ProposalSet, cfg: PipelineConfig, backends: Backends | None = None) -> SampleResult:
    return Pipeline(cfg, backends).run_sample(sample, proposals)


def run_split(
    manifest: str | Path,
    proposals_dir: str | Path,
    cfg: PipelineConfig,
    out_dir: str | Path | None = None,
    backends: Backends | None = None,
    lenient: bool = False,
) -> RunOutcome:
    return Pipeline(cfg, backends).run_split(manifest, proposals_dir, out_dir, lenient)
