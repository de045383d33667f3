"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import convert as convert_mod
from .backends import KINDS, ResponseCache
from .backends.cache import CACHE_ENV, DEFAULT_CACHE_DIR
from .dataset import load_dataset, load_image
from .errors import NotFound, RefSegError
from .evaluation import ablation_csv, default_grid, run_ablation, run_sweep, sweep_csv, write_text
from .masks import rle_decode
from .pipeline import (
    DATASET_TAGS,
    Pipeline,
    PipelineConfig,
    SampleResult,
    load_results,
    metrics_from_results,
    result_path,
)
from .prompts import ATTRIBUTE_TEMPLATE, SURROUNDING_TEMPLATE
from .scoring import FusionWeights
from .viz import render_visualization

log = logging.getLogger("refseg")


def float_list(text: str) -> list[float]:
    parts = text.split(",")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not all(math.isfinite(v) and v >= 0 for v in values):
        raise argparse.ArgumentTypeError(f"weights must be finite and non-negative: {text!r}")
    return values


def _dump(obj: object) -> None:
    print(json.dumps(obj, indent=1))


def resolve_cache_dir(flag: str | None, cfg: PipelineConfig | None = None) -> Path:
    if flag:
        return Path(flag)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    if cfg is not None and cfg.cache_dir:
        return Path(cfg.cache_dir)
    return Path(DEFAULT_CACHE_DIR)


def effective_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes: dict = {}
    alpha, beta = cfg.weights.alpha, cfg.weights.beta
    if args.dataset_tag:
        changes["dataset_tag"] = args.dataset_tag
        alpha = FusionWeights.for_dataset(args.dataset_tag).alpha
    if args.alpha is not None:
        alpha = args.alpha
    if args.beta is not None:
        beta = args.beta
    changes["weights"] = FusionWeights(alpha, beta)
    if args.tau is not None:
        changes["tau"] = args.tau
    if args.workers is not None:
        changes["worker_limit"] = args.workers
    changes["cache_dir"] = str(resolve_cache_dir(args.cache_dir, cfg))
    return replace(cfg, **changes)


def _pipeline(args: argparse.Namespace) -> Pipeline:
    cfg = effective_config(args)
    return Pipeline(cfg, cache=ResponseCache(cfg.cache_dir))


# ------------------------------------------------------------------ commands


def cmd_run(args: argparse.Namespace) -> int:
    outcome = _pipeline(args).run_split(args.manifest, args.proposals, args.out, lenient=args.lenient)
    _dump(outcome.metrics_json())
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    results = load_results(args.run)
    if args.manifest:
        wanted = [s.sample_id for s in load_dataset(args.manifest, lenient=args.lenient)]
        have = {r.sample_id: r for r in results}
        missing = [sid for sid in wanted if sid not in have]
        if missing:
            raise NotFound(f"{len(missing)} samples have no result in {args.run}, e.g. {missing[:3]}")
        results = [have[sid] for sid in wanted]
    digests = {r.config_digest for r in results}
    if len(digests) > 1:
        raise RefSegError(f"{args.run} mixes results from {len(digests)} configurations")
    oiou, miou = metrics_from_results(results)
    _dump({"oIoU": oiou, "mIoU": miou, "n": len(results)})
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    pipe = _pipeline(args)
    scored = pipe.score_split(args.manifest, args.proposals, args.out, lenient=args.lenient)
    rows = run_ablation(scored, pipe.cfg.weights)
    write_text(Path(args.out) / "ablation.csv", ablation_csv(rows))
    _dump([{"config": r.config.label, "use_att": r.config.use_att, "use_sur": r.config.use_sur,
            "oIoU": r.oiou, "mIoU": r.miou} for r in rows])
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.default_grid:
        alphas, betas = default_grid()
    else:
        alphas, betas = args.alphas, args.betas
    pipe = _pipeline(args)
    scored = pipe.score_split(args.manifest, args.proposals, args.out, lenient=args.lenient)
    grid = run_sweep(scored, alphas, betas)
    write_text(Path(args.out) / "sweep.csv", sweep_csv(grid))
    best = {}
    for metric, key in (("oiou", "best_by_oIoU"), ("miou", "best_by_mIoU")):
        a, b, o, m = grid.best(metric)
        best[key] = {"alpha": a, "beta": b, "oIoU": o, "mIoU": m}
    _dump(best)
    return 0


def cmd_prompts_show(args: argparse.Namespace) -> int:
    print("[attribute]")
    print(ATTRIBUTE_TEMPLATE)
    print()
    print("[surrounding]")
    print(SURROUNDING_TEMPLATE)
    return 0


def cmd_cache_stats(args: argparse.Namespace) -> int:
    cache = ResponseCache(resolve_cache_dir(args.cache_dir))
    _dump({"root": str(cache.root), **cache.stats()})
    return 0


def cmd_cache_gc(args: argparse.Namespace) -> int:
    cache = ResponseCache(resolve_cache_dir(args.cache_dir))
    older = args.older_than_days * 86400.0 if args.older_than_days is not None else None
    removed = cache.gc(kind=args.kind, older_than_s=older)
    _dump({"root": str(cache.root), "removed": removed})
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    path = result_path(Path(args.run), args.sample)
    if not path.is_file():
        raise NotFound(f"no result for sample {args.sample!r} in {args.run}")
    res = SampleResult.from_json(json.loads(path.read_text(encoding="utf-8")))
    image = load_image(res.image_path)
    b = res.bundle
    captions = [f"T_van: {b.t_van}", f"T_att: {b.t_att}", f"T_sur: {b.t_sur}"]
    out = render_visualization(image, rle_decode(res.selected_proposal), rle_decode(res.gt_mask), captions, args.out)
    _dump({"written": str(out)})
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    n = convert_mod.convert(args.refs, args.instances, args.images_dir, args.out, args.partition, args.split)
    _dump({"samples": n, "manifest": args.out})
    return 0


# ------------------------------------------------------------------- parser


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="manifest.jsonl of samples")
    p.add_argument("--proposals", required=True, help="directory of <image_id>.json proposal files")
    p.add_argument("--config", help="pipeline config JSON (defaults: offline stub backends)")
    p.add_argument("--out", required=True, help="run directory for results (resumable)")
    p.add_argument("--lenient", action="store_true", help="skip bad records and failed samples instead of aborting")
    p.add_argument("--alpha", type=float, help="weight of the attribute score")
    p.add_argument("--beta", type=float, help="weight of the surrounding score")
    p.add_argument("--tau", type=float, help="negative-phrase similarity threshold")
    p.add_argument("--workers", type=int, help="concurrent samples")
    p.add_argument("--dataset-tag", choices=DATASET_TAGS, help="selects the default alpha")
    p.add_argument("--cache-dir", help=f"response cache root (env {CACHE_ENV}, default ./{DEFAULT_CACHE_DIR})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refseg", description="Zero-shot referring segmentation harness.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="run the pipeline over a split and print metrics")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="recompute metrics from a run directory")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--manifest", help="require a result for every sample in this manifest")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="score ablation table (writes ablation.csv)")
    _add_run_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="alpha/beta sensitivity sweep (writes sweep.csv)")
    _add_run_args(p)
    grid = p.add_mutually_exclusive_group(required=True)
    grid.add_argument("--alphas", type=float_list, help="comma-separated alpha values")
    grid.add_argument("--default-grid", action="store_true",
                      help="alpha in 0,0.1,..,1.0 and beta in 0,0.25,..,2.0")
    p.add_argument("--betas", type=float_list, help="comma-separated beta values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("prompts-show", help="print the two MLLM prompt templates")
    p.set_defaults(func=cmd_prompts_show)
    p = sub.add_parser("prompts", help="prompt utilities")
    psub = p.add_subparsers(dest="prompts_command", required=True, metavar="ACTION")
    psub.add_parser("show", help="print the two MLLM prompt templates").set_defaults(func=cmd_prompts_show)

    p = sub.add_parser("cache-stats", help="entries and bytes per backend kind")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_cache_stats)

    p = sub.add_parser("cache-gc", help="delete cache entries")
    p.add_argument("--cache-dir")
    p.add_argument("--kind", choices=KINDS)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--older-than-days", type=float, help="delete entries older than this")
    which.add_argument("--all", action="store_true", help="delete every entry (of --kind, if given)")
    p.set_defaults(func=cmd_cache_gc)

    p = sub.add_parser("visualize", help="PNG overlay of a sample's selected mask")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--sample", required=True, help="sample id")
    p.add_argument("--out", required=True, help="PNG path to write")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("convert-dataset", help="convert a refer-toolkit export to manifest.jsonl")
    convert_mod.add_arguments(p)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sweep" and not args.default_grid and not args.betas:
        parser.error("sweep: --betas is required with --alphas")
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted; completed samples are saved and the run can be resumed", file=sys.stderr)
        return 1
    except (RefSegError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
