"""Command-line surface: explain, evaluate, reliance, filter, sweep,
compare, prep.

Exit codes: 0 success, 2 partial per-sample failures, 3 configuration
errors. Adapter plugins are discovered from OPENLENS_ADAPTER_PATH
(os.pathsep-separated python files defining ``register``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.base import clone

from . import artifacts
from .adapters import ModelAdapter, load_plugins, make_adapter
from .evaluation import (
    DEFAULT_MIN_DROP,
    DEFAULT_NUM_POINTS,
    RelianceStats,
    answer_probability_drop,
    compare_heatmaps,
    filter_vision_dependent,
    perturbation_curve,
)
from .exceptions import ConfigurationError, DegenerateAnswer, OpenLensError
from .masking import make_baseline
from .optimizer import MaskExplainer
from .relevance import compute_llr, select_crucial_tokens
from .types import Mask, ScorableSample

logger = logging.getLogger("openlens")

MODE_ALIASES = {"single": "single_mask", "separate": "separate_masks"}


def _add_common_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--adapter", default="toy", help="registered adapter name")
    parser.add_argument("--baseline", default="blurred", choices=["blurred", "blank", "noise"])
    parser.add_argument("--blur-sigma", type=float, default=10.0)
    parser.add_argument("--alpha-llr", type=float, default=1.0)
    parser.add_argument("--lambda1", type=float, default=1.0)
    parser.add_argument("--lambda2", type=float, default=0.1)
    parser.add_argument("--lambda3", type=float, default=10.0)
    parser.add_argument("--gamma", type=float, default=0.2)
    parser.add_argument("--steps", type=int, default=30)
    parser.add_argument("--step-size", type=float, default=1.0)
    parser.add_argument("--sigma-btv", type=float, default=0.1)
    parser.add_argument("--mode", default="single", choices=["single", "separate"])
    parser.add_argument("--mask-resolution", type=int, nargs=2, default=(28, 28),
                        metavar=("H", "W"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--output-dir", default="openlens_out")
    parser.add_argument("--num-points", type=int, default=DEFAULT_NUM_POINTS)
    parser.add_argument("--min-drop", type=float, default=DEFAULT_MIN_DROP)
    parser.add_argument("--max-tokens", type=int, default=8,
                        help="generation length when the manifest has no answer")
    parser.add_argument("--fail-fast", action="store_true")
    parser.add_argument("--verbose", action="store_true")


def _explainer_from_args(args, adapter: Optional[ModelAdapter] = None) -> MaskExplainer:
    return MaskExplainer(
        adapter=adapter,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        lambda3=args.lambda3,
        gamma=args.gamma,
        alpha_llr=args.alpha_llr,
        steps=args.steps,
        step_size=args.step_size,
        mask_resolution=tuple(args.mask_resolution),
        mode=MODE_ALIASES[args.mode],
        baseline=args.baseline,
        blur_sigma=args.blur_sigma,
        sigma_btv=args.sigma_btv,
        seed=args.seed,
    )


class _AdapterCache:
    """One adapter per image shape (toy adapters are shape-bound)."""

    def __init__(self, name: str, seed: int):
        self.name = name
        self.seed = seed
        self._cache: Dict[Tuple[int, int, int], ModelAdapter] = {}

    def for_shape(self, shape: Tuple[int, int, int]) -> ModelAdapter:
        key = tuple(shape)
        if key not in self._cache:
            self._cache[key] = make_adapter(self.name, key, self.seed)
        return self._cache[key]

    def infos(self) -> List[dict]:
        return [a.info().to_jsonable() for a in self._cache.values()]


def _build_sample(entry, adapters: _AdapterCache, max_tokens: int) -> Tuple[ScorableSample, ModelAdapter]:
    image = artifacts.load_image(entry.image_path)
    adapter = adapters.for_shape(image.shape)
    if entry.answer is not None:
        answer = entry.answer
    else:
        answer = tuple(adapter.generate(image, entry.question, max_tokens))
    sample = ScorableSample(
        image=image, question=entry.question, answer_tokens=answer, sample_id=entry.sample_id
    )
    return sample, adapter


def _selection_for(adapter, sample, baseline, alpha_llr: float) -> Tuple[int, ...]:
    report = compute_llr(adapter, sample, baseline)
    try:
        return select_crucial_tokens(report, alpha_llr).selected_indices
    except DegenerateAnswer:
        return (0,)


# -- explain ------------------------------------------------------------------


def _explain_one(entry, adapters: _AdapterCache, args) -> dict:
    sample, adapter = _build_sample(entry, adapters, args.max_tokens)
    if not adapter.supports_gradients:
        raise ConfigurationError(
            f"adapter {adapter.name!r} has supports_gradients=false; "
            "the explain command needs gradients"
        )
    explainer = _explainer_from_args(args, adapter).fit(sample)
    return {"entry": entry, "sample": sample, "explainer": explainer}


def _write_explain_artifacts(out_dir: Path, result: dict, token_plot: bool) -> dict:
    entry = result["entry"]
    sample = result["sample"]
    explainer = result["explainer"]
    sample_dir = out_dir / entry.sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)

    heatmap = explainer.heatmap_
    artifacts.save_heatmap_raw(sample_dir / "heatmap.raw", heatmap)
    artifacts.save_overlay_png(sample_dir / "heatmap.png", sample.image, heatmap)

    relevance = explainer.report_.to_jsonable()
    relevance["sample_id"] = entry.sample_id
    artifacts.write_json(sample_dir / "relevance.json", relevance)

    with open(sample_dir / "trace.jsonl", "w", encoding="utf-8") as fh:
        fh.write(explainer.trace_.to_jsonl() + "\n")

    report = {
        "schema_version": artifacts.SCHEMA_VERSION,
        "sample_id": entry.sample_id,
        "dataset_tag": entry.dataset_tag,
        "image_path": entry.image_path,
        "question": sample.question,
        "answer_tokens": list(sample.answer_tokens),
        "selected_indices": list(explainer.selected_indices_),
        "sentence_llr": explainer.report_.sentence_llr,
        "score_original": explainer.report_.score_original,
        "score_baseline": explainer.report_.score_baseline,
        "converged": explainer.trace_.converged,
        "n_steps": len(explainer.trace_.entries),
        "config": explainer.config_.to_jsonable(),
        "baseline_kind": explainer.baseline_.kind,
        "heatmap_shape": list(heatmap.shape),
        "artifacts": {
            "heatmap_raw": "heatmap.raw",
            "heatmap_png": "heatmap.png",
            "relevance": "relevance.json",
            "trace": "trace.jsonl",
        },
    }
    if token_plot:
        artifacts.save_token_plot(sample_dir / "relevance.png", relevance)
        report["artifacts"]["token_plot"] = "relevance.png"
    artifacts.write_json(sample_dir / "report.json", report)
    return {
        "sample_id": entry.sample_id,
        "status": "ok",
        "wall_time": explainer.trace_.wall_time,
        "paths": {k: str(sample_dir / v) for k, v in report["artifacts"].items()},
    }


def cmd_explain(args) -> int:
    manifest = artifacts.load_manifest(args.manifest)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    adapters = _AdapterCache(args.adapter, args.seed)
    statuses: List[dict] = []
    failures = 0

    def run(entry):
        return _explain_one(entry, adapters, args)

    entries = list(manifest.entries)
    results: List[Tuple[object, object]] = []
    if args.workers > 1 and entries:
        probe = adapters.for_shape(artifacts.load_image(entries[0].image_path).shape)
        if not probe.thread_safe:
            logger.warning("adapter %s is not thread safe; using 1 worker", probe.name)
            args.workers = 1
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            futures = [(e, pool.submit(run, e)) for e in entries]
            for entry, fut in futures:
                try:
                    results.append((entry, fut.result()))
                except OpenLensError as exc:
                    results.append((entry, exc))
    else:
        for entry in entries:
            try:
                results.append((entry, run(entry)))
            except OpenLensError as exc:
                results.append((entry, exc))
                if args.fail_fast:
                    break

    for entry, result in results:
        if isinstance(result, ConfigurationError):
            raise result
        if isinstance(result, Exception):
            failures += 1
            logger.error("sample %s failed: %s", entry.sample_id, result)
            statuses.append({"sample_id": entry.sample_id, "status": "failed",
                             "error": str(result)})
            if args.fail_fast:
                break
            continue
        statuses.append(_write_explain_artifacts(out_dir, result, args.token_plot))

    run_meta = {
        "command": "explain",
        "adapter": args.adapter,
        "adapter_info": adapters.infos(),
        "samples": statuses,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(run_meta, fh, indent=2, sort_keys=True)
    completed = sum(1 for s in statuses if s["status"] == "ok")
    print(f"explained {completed}/{len(entries)} samples -> {out_dir}")
    return 2 if failures else 0


# -- evaluate -----------------------------------------------------------------


def _evaluate_entry(entry, adapters: _AdapterCache, heatmap_dir, args) -> dict:
    sample, adapter = _build_sample(entry, adapters, args.max_tokens)
    heatmap = artifacts.resolve_heatmap(heatmap_dir, entry.sample_id,
                                        (sample.image.height, sample.image.width))
    baseline = make_baseline(sample.image, args.baseline, blur_sigma=args.blur_sigma,
                             seed=args.seed)
    selected = _selection_for(adapter, sample, baseline, args.alpha_llr)
    del_curve = perturbation_curve(adapter, sample, baseline, heatmap, selected,
                                   "deletion", args.num_points)
    ins_curve = perturbation_curve(adapter, sample, baseline, heatmap, selected,
                                   "insertion", args.num_points)
    return {
        "sample_id": entry.sample_id,
        "dataset_tag": entry.dataset_tag,
        "selected_indices": list(selected),
        "deletion": del_curve.to_jsonable(),
        "insertion": ins_curve.to_jsonable(),
        "deletion_auc": del_curve.auc,
        "insertion_auc": ins_curve.auc,
    }


def cmd_evaluate(args) -> int:
    manifest = artifacts.load_manifest(args.manifest)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    adapters = _AdapterCache(args.adapter, args.seed)
    per_sample: List[dict] = []
    failures = 0
    for entry in manifest.entries:
        try:
            result = _evaluate_entry(entry, adapters, args.heatmap_dir, args)
        except OpenLensError as exc:
            failures += 1
            logger.error("sample %s failed: %s", entry.sample_id, exc)
            if args.fail_fast:
                break
            continue
        per_sample.append(result)
        artifacts.write_json(out_dir / f"{entry.sample_id}.eval.json", result)

    by_tag: Dict[str, List[Tuple[float, float]]] = {}
    for r in per_sample:
        by_tag.setdefault(r["dataset_tag"], []).append((r["deletion_auc"], r["insertion_auc"]))
    rows = {
        tag: (
            float(np.mean([d for d, _ in pairs])),
            float(np.mean([i for _, i in pairs])),
            len(pairs),
        )
        for tag, pairs in by_tag.items()
    }
    csv_path = out_dir / "evaluation.csv"
    artifacts.write_evaluation_csv(csv_path, rows)
    print(f"evaluated {len(per_sample)}/{len(manifest.entries)} samples -> {csv_path}")
    return 2 if failures else 0


# -- reliance / filter --------------------------------------------------------


def cmd_reliance(args) -> int:
    manifest = artifacts.load_manifest(args.manifest)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    adapters = _AdapterCache(args.adapter, args.seed)
    drops_by_tag: Dict[str, List[Tuple[str, float]]] = {}
    failures = 0
    for entry in manifest.entries:
        try:
            sample, adapter = _build_sample(entry, adapters, args.max_tokens)
            baseline = make_baseline(sample.image, args.baseline,
                                     blur_sigma=args.blur_sigma, seed=args.seed)
            drop = answer_probability_drop(adapter, sample, baseline)
        except OpenLensError as exc:
            failures += 1
            logger.error("sample %s failed: %s", entry.sample_id, exc)
            if args.fail_fast:
                break
            continue
        drops_by_tag.setdefault(entry.dataset_tag, []).append((entry.sample_id, drop))

    stats_list = []
    all_drops: Dict[str, float] = {}
    for tag in sorted(drops_by_tag):
        stats = RelianceStats(label=tag, drops=tuple(drops_by_tag[tag]))
        stats_list.append(stats)
        all_drops.update(stats.drop_by_id())

    csv_path = out_dir / "reliance.csv"
    artifacts.write_reliance_csv(csv_path, stats_list)
    artifacts.write_json(
        out_dir / "reliance_stats.json",
        {
            "adapter": args.adapter,
            "per_tag": [s.to_jsonable() for s in stats_list],
            "drops": all_drops,
        },
    )
    kept = sorted(sid for sid, drop in all_drops.items() if drop >= args.min_drop)
    with open(out_dir / "filtered_ids.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(kept) + ("\n" if kept else ""))
    print(f"reliance stats for {len(all_drops)} samples -> {csv_path}")
    return 2 if failures else 0


def cmd_filter(args) -> int:
    stats_list = []
    for path in args.stats:
        payload = artifacts.read_json(path)
        stats_list.append(
            RelianceStats(
                label=payload.get("adapter", Path(path).stem),
                drops=tuple(payload["drops"].items()),
            )
        )
    kept = filter_vision_dependent(stats_list, min_drop=args.min_drop)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(kept) + ("\n" if kept else ""))
    print(f"kept {len(kept)} vision-dependent samples -> {out_path}")
    return 0


# -- sweep --------------------------------------------------------------------


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v != ""]
    if not values:
        raise ConfigurationError("sweep needs a non-empty value grid")
    base = _explainer_from_args(args)
    if args.param not in base.get_params():
        raise ConfigurationError(
            f"unknown sweep parameter {args.param!r}; one of {sorted(base.get_params())}"
        )
    manifest = artifacts.load_manifest(args.manifest)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    adapters = _AdapterCache(args.adapter, args.seed)

    rows: Dict[float, Dict[str, Tuple[float, float]]] = {}
    point_errors: Dict[float, str] = {}
    for value in values:
        by_tag: Dict[str, List[Tuple[float, float]]] = {}
        try:
            for entry in manifest.entries:
                sample, adapter = _build_sample(entry, adapters, args.max_tokens)
                explainer = clone(base).set_params(adapter=adapter, **{args.param: value})
                explainer.fit(sample)
                baseline = explainer.baseline_
                selected = explainer.selected_indices_
                del_curve = perturbation_curve(adapter, sample, baseline, explainer.heatmap_,
                                               selected, "deletion", args.num_points)
                ins_curve = perturbation_curve(adapter, sample, baseline, explainer.heatmap_,
                                               selected, "insertion", args.num_points)
                by_tag.setdefault(entry.dataset_tag, []).append(
                    (del_curve.auc, ins_curve.auc)
                )
        except OpenLensError as exc:
            point_errors[value] = str(exc)
            logger.error("sweep point %s=%s failed: %s", args.param, value, exc)
            continue
        rows[value] = {
            tag: (float(np.mean([d for d, _ in p])), float(np.mean([i for _, i in p])))
            for tag, p in by_tag.items()
        }

    csv_path = out_dir / "sweep.csv"
    artifacts.write_sweep_csv(csv_path, args.param, rows, manifest.tags())
    if point_errors:
        artifacts.write_json(out_dir / "sweep_errors.json",
                             {repr(k): v for k, v in point_errors.items()})
    print(f"swept {args.param} over {values} -> {csv_path}")
    return 2 if point_errors else 0


# -- compare / prep -----------------------------------------------------------


def cmd_compare(args) -> int:
    shape = tuple(args.shape) if args.shape else None

    def load(path: str) -> Mask:
        p = Path(path)
        if p.suffix == ".npy":
            own_shape = np.load(p).shape
            return artifacts.load_external_heatmap(p, shape or own_shape)
        if shape is None:
            raise ConfigurationError("--shape H W is required for raw heatmaps")
        return artifacts.load_heatmap_raw(p, shape)

    scores = compare_heatmaps(load(args.heatmap_a), load(args.heatmap_b))
    payload = scores.to_jsonable()
    print(json.dumps(payload, sort_keys=True))
    if args.output:
        artifacts.write_json(args.output, payload)
    return 0


def strip_choice_block(question: str, marker: str = "Options:") -> str:
    """Relax a multiple-choice question: drop the marker line and everything
    after it (structural rule, no regexes)."""
    kept = []
    for line in question.splitlines():
        if line.strip().startswith(marker):
            break
        kept.append(line)
    return "\n".join(kept).rstrip()


def cmd_prep(args) -> int:
    manifest = artifacts.load_manifest(args.manifest)
    entries = []
    for entry in manifest.entries:
        question = strip_choice_block(entry.question, args.choice_marker)
        entries.append(
            artifacts.ManifestEntry(
                sample_id=entry.sample_id,
                image_path=entry.image_path,
                question=question,
                answer=entry.answer,
                dataset_tag=entry.dataset_tag,
            )
        )
    out = artifacts.DatasetManifest(entries=tuple(entries),
                                    schema_version=manifest.schema_version)
    artifacts.write_manifest(args.output, out)
    print(f"prepared {len(entries)} entries -> {args.output}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openlens",
        description="Saliency heatmaps for open-ended answers of vision-language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_explain = sub.add_parser("explain", help="optimize heatmaps for manifest samples")
    p_explain.add_argument("manifest")
    p_explain.add_argument("--token-plot", action="store_true",
                           help="also render the per-token probability plot")
    _add_common_options(p_explain)
    p_explain.set_defaults(func=cmd_explain)

    p_eval = sub.add_parser("evaluate", help="deletion/insertion AUC for stored heatmaps")
    p_eval.add_argument("manifest")
    p_eval.add_argument("--heatmap-dir", required=True)
    _add_common_options(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_rel = sub.add_parser("reliance", help="answer-probability drop statistics")
    p_rel.add_argument("manifest")
    _add_common_options(p_rel)
    p_rel.set_defaults(func=cmd_reliance)

    p_filter = sub.add_parser("filter", help="intersect vision-dependent samples across models")
    p_filter.add_argument("--stats", nargs="+", required=True,
                          help="reliance_stats.json files, one per model")
    p_filter.add_argument("--min-drop", type=float, default=DEFAULT_MIN_DROP)
    p_filter.add_argument("--output", default="filtered_ids.txt")
    p_filter.set_defaults(func=cmd_filter)

    p_sweep = sub.add_parser("sweep", help="parameter study over explain+evaluate")
    p_sweep.add_argument("manifest")
    p_sweep.add_argument("--param", default="lambda2")
    p_sweep.add_argument("--values", default="0.0,0.1,1.0,10.0")
    _add_common_options(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="soft IOU and rank correlation of two heatmaps")
    p_cmp.add_argument("heatmap_a")
    p_cmp.add_argument("heatmap_b")
    p_cmp.add_argument("--shape", type=int, nargs=2, default=None, metavar=("H", "W"))
    p_cmp.add_argument("--output", default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_prep = sub.add_parser("prep", help="relax multiple-choice questions to open-ended")
    p_prep.add_argument("manifest")
    p_prep.add_argument("--output", required=True)
    p_prep.add_argument("--choice-marker", default="Options:")
    p_prep.set_defaults(func=cmd_prep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        load_plugins()
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except OpenLensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
