"""Evaluation: normalized deletion/insertion curves, reliance statistics,
vision-dependence filtering and heatmap-to-heatmap comparison.

Deletion replaces pixels of the original image with baseline pixels in
descending heatmap order (row-major index breaks ties) and tracks the
selected-token score; insertion starts from the baseline and restores
original pixels in the same order. Scores are normalized against the
original-image and baseline-image anchors so curves are comparable across
models; deletion then starts at 1 and insertion at 0 by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats as sstats

from .adapters import ModelAdapter
from .exceptions import (
    InvariantViolation,
    MismatchedSampleSets,
    NormalizationDegenerate,
    ShapeMismatch,
)
from .masking import make_baseline
from .relevance import joint_probability_score, prediction_score
from .types import BaselineImage, EvaluationCurve, Image, Mask, ScorableSample

DEFAULT_NUM_POINTS = 20
DEFAULT_MIN_DROP = 70.0
DEFAULT_THRESHOLDS = (30.0, 70.0)


def normalize_score(raw: float, f_original: float, f_baseline: float) -> float:
    """Linear score normalization with the two anchor images.

    Values outside [0, 1] are legal and preserved (a perturbed image may
    score beyond both anchors).
    """
    if f_original == f_baseline:
        raise NormalizationDegenerate(
            "original and baseline scores coincide; sample should be filtered"
        )
    return (raw - f_baseline) / (f_original - f_baseline)


def ranked_pixel_order(heatmap: Mask) -> np.ndarray:
    """Flat pixel indices in descending heatmap order, ties by row-major."""
    return np.argsort(-heatmap.values.ravel(), kind="stable")


def perturbation_curve(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    heatmap: Mask,
    selected_indices: Sequence[int],
    direction: str,
    num_points: int = DEFAULT_NUM_POINTS,
) -> EvaluationCurve:
    """Normalized deletion or insertion curve of a heatmap.

    At fraction p the top round(p*N) ranked pixels are swapped (deletion:
    original -> baseline; insertion: baseline -> original) and the
    selected-token score of the intermediate image is recorded.
    """
    if direction not in ("deletion", "insertion"):
        raise ValueError(f"direction {direction!r}")
    if num_points < 2:
        raise ValueError("num_points must be >= 2")
    if sample.image.shape != baseline.shape:
        raise ShapeMismatch(f"baseline {baseline.shape} vs image {sample.image.shape}")
    if heatmap.shape != (sample.image.height, sample.image.width):
        raise ShapeMismatch(
            f"heatmap {heatmap.shape} must be at image resolution "
            f"{(sample.image.height, sample.image.width)}"
        )

    def f(pixels: np.ndarray) -> float:
        return prediction_score(
            adapter, Image(pixels), sample.question, sample.answer_tokens, selected_indices
        )

    f_original = f(sample.image.pixels)
    f_baseline = f(baseline.pixels)
    if f_original == f_baseline:
        raise NormalizationDegenerate(
            "original and baseline scores coincide; sample should be filtered"
        )

    order = ranked_pixel_order(heatmap)
    n_pix = order.size
    channels = sample.image.channels
    img_flat = sample.image.pixels.reshape(n_pix, channels)
    base_flat = baseline.pixels.reshape(n_pix, channels)
    shape = sample.image.shape

    fractions, scores = [], []
    for k in range(num_points):
        p = k / (num_points - 1)
        count = int(p * n_pix + 0.5)
        swapped = order[:count]
        if direction == "deletion":
            work = img_flat.copy()
            work[swapped] = base_flat[swapped]
        else:
            work = base_flat.copy()
            work[swapped] = img_flat[swapped]
        raw = f(work.reshape(shape))
        fractions.append(p)
        scores.append(normalize_score(raw, f_original, f_baseline))
    return EvaluationCurve.from_points(direction, fractions, scores)


# -- reliance statistics ------------------------------------------------------


@dataclass(frozen=True)
class RelianceStats:
    """Per-sample answer-probability drops and their bucket counts.

    ``drop`` for a sample is (1 - P(answer | baseline) / P(answer | image))
    in percent, computed from whole-answer joint probabilities. Buckets:
    below the first threshold, between the thresholds (inclusive), above
    the second.
    """

    label: str
    drops: Tuple[Tuple[str, float], ...]
    thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        lo, hi = self.thresholds
        if lo > hi:
            raise InvariantViolation("thresholds must be ordered")
        object.__setattr__(self, "drops", tuple((str(s), float(d)) for s, d in self.drops))

    @property
    def counts(self) -> Tuple[int, int, int]:
        lo, hi = self.thresholds
        values = [d for _, d in self.drops]
        low = sum(1 for d in values if d < lo)
        mid = sum(1 for d in values if lo <= d <= hi)
        high = sum(1 for d in values if d > hi)
        return (low, mid, high)

    @property
    def percentages(self) -> Tuple[float, float, float]:
        n = len(self.drops)
        if n == 0:
            return (0.0, 0.0, 0.0)
        return tuple(round(100.0 * c / n, 1) for c in self.counts)

    def drop_by_id(self) -> Dict[str, float]:
        return dict(self.drops)

    def to_jsonable(self) -> dict:
        return {
            "label": self.label,
            "thresholds": list(self.thresholds),
            "drops": [[s, d] for s, d in self.drops],
            "counts": list(self.counts),
            "percentages": list(self.percentages),
        }


def answer_probability_drop(
    adapter: ModelAdapter, sample: ScorableSample, baseline: BaselineImage
) -> float:
    """Percent drop of the whole-answer probability without visual input."""
    joint_original = joint_probability_score(
        adapter, sample.image, sample.question, sample.answer_tokens
    )
    joint_baseline = joint_probability_score(
        adapter, Image(baseline.pixels), sample.question, sample.answer_tokens
    )
    return float((1.0 - np.exp(joint_baseline - joint_original)) * 100.0)


def reliance_stats(
    adapter: ModelAdapter,
    samples: Sequence[ScorableSample],
    baseline_kind: str = "blurred",
    thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS,
    blur_sigma: float = 10.0,
    seed: int = 0,
    label: str = "",
) -> RelianceStats:
    if not samples:
        raise ValueError("samples must be non-empty")
    drops = []
    for sample in samples:
        baseline = make_baseline(sample.image, baseline_kind, blur_sigma=blur_sigma, seed=seed)
        drops.append((sample.sample_id, answer_probability_drop(adapter, sample, baseline)))
    return RelianceStats(label=label, drops=tuple(drops), thresholds=tuple(thresholds))


def filter_vision_dependent(
    stats_per_model: Sequence[RelianceStats], min_drop: float = DEFAULT_MIN_DROP
) -> List[str]:
    """Sample ids whose answer probability drops by at least ``min_drop``
    percent under EVERY model."""
    if not stats_per_model:
        raise MismatchedSampleSets("no per-model statistics given")
    maps = [s.drop_by_id() for s in stats_per_model]
    ids = set(maps[0])
    for m in maps[1:]:
        if set(m) != ids:
            raise MismatchedSampleSets("models were evaluated on different sample ids")
    return sorted(sid for sid in ids if all(m[sid] >= min_drop for m in maps))


# -- heatmap comparison -------------------------------------------------------


@dataclass(frozen=True)
class ComparisonScores:
    soft_iou: float
    rank_correlation: float

    def __post_init__(self):
        if not (0.0 <= self.soft_iou <= 1.0):
            raise InvariantViolation("soft_iou outside [0, 1]")
        if not (-1.0 <= self.rank_correlation <= 1.0):
            raise InvariantViolation("rank_correlation outside [-1, 1]")

    def to_jsonable(self) -> dict:
        return {"soft_iou": self.soft_iou, "rank_correlation": self.rank_correlation}


def compare_heatmaps(a: Mask, b: Mask) -> ComparisonScores:
    """Soft IOU (sum of elementwise min over max) and Spearman rank
    correlation of two heatmaps.

    Two all-zero masks overlap perfectly (soft IOU 1.0). Rank correlation
    is reported as 0.0 when either heatmap is constant, where a monotone
    association is undefined.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    av, bv = a.values.ravel(), b.values.ravel()
    denom = np.maximum(av, bv).sum()
    soft_iou = 1.0 if denom == 0.0 else float(np.minimum(av, bv).sum() / denom)
    if np.ptp(av) == 0.0 or np.ptp(bv) == 0.0:
        rank = 0.0
    else:
        rank = float(sstats.spearmanr(av, bv).statistic)
    return ComparisonScores(soft_iou=soft_iou, rank_correlation=rank)
