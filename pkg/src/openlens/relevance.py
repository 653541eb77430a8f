"""Visually relevant token selection and the scalar prediction score.

The log-likelihood ratio of a token is its conditional log-probability
under the original image minus the one under the baseline image; the
sentence-level ratio is exactly the sum of the per-token ratios. Tokens
whose ratio clears a threshold (never the first token, which mostly fixes
sentence structure) form the crucial set K, and the prediction score f is
the cumulative log-likelihood of K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .adapters import ModelAdapter
from .exceptions import DegenerateAnswer, EmptySelection, ShapeMismatch
from .types import BaselineImage, Image, ScorableSample, TokenRecord


@dataclass(frozen=True)
class RelevanceReport:
    """Per-token relevance records plus the selection derived from them.

    ``score_original``/``score_baseline`` are the prediction score f at the
    original and baseline image, summed over the selected tokens; they are
    None until a selection exists.
    """

    records: Tuple[TokenRecord, ...]
    sentence_llr: float
    selected_indices: Tuple[int, ...] = ()
    score_original: Optional[float] = None
    score_baseline: Optional[float] = None

    def llr_values(self) -> np.ndarray:
        return np.array([r.llr for r in self.records])

    def to_jsonable(self) -> dict:
        return {
            "token_ids": [r.token_id for r in self.records],
            "logp_original": [r.logp_original for r in self.records],
            "logp_baseline": [r.logp_baseline for r in self.records],
            "llr": [r.llr for r in self.records],
            "selected": [r.selected for r in self.records],
            "sentence_llr": self.sentence_llr,
            "selected_indices": list(self.selected_indices),
            "score_original": self.score_original,
            "score_baseline": self.score_baseline,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "RelevanceReport":
        records = tuple(
            TokenRecord(
                index=i,
                token_id=tok,
                logp_original=lo,
                logp_baseline=lb,
                llr=lo - lb,
                selected=sel,
            )
            for i, (tok, lo, lb, sel) in enumerate(
                zip(d["token_ids"], d["logp_original"], d["logp_baseline"], d["selected"])
            )
        )
        return cls(
            records=records,
            sentence_llr=d["sentence_llr"],
            selected_indices=tuple(d["selected_indices"]),
            score_original=d.get("score_original"),
            score_baseline=d.get("score_baseline"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True)


def compute_llr(
    adapter: ModelAdapter, sample: ScorableSample, baseline: BaselineImage
) -> RelevanceReport:
    """Score the answer under the original and the baseline image.

    Returns a report with one record per token and the sentence ratio; no
    selection is applied yet (all records carry selected=False).
    """
    if sample.image.shape != baseline.shape:
        raise ShapeMismatch(
            f"baseline {baseline.shape} does not match image {sample.image.shape}"
        )
    logp_orig = adapter.conditional_logprobs(sample.image, sample.question, sample.answer_tokens)
    baseline_image = Image(baseline.pixels)
    logp_base = adapter.conditional_logprobs(baseline_image, sample.question, sample.answer_tokens)
    records = tuple(
        TokenRecord.from_logps(i, tok, lo, lb)
        for i, (tok, lo, lb) in enumerate(zip(sample.answer_tokens, logp_orig, logp_base))
    )
    return RelevanceReport(records=records, sentence_llr=float(sum(r.llr for r in records)))


def select_crucial_tokens(report: RelevanceReport, alpha_llr: float) -> RelevanceReport:
    """Select tokens with LLR above the threshold, excluding the first token.

    If nothing clears the threshold, falls back to the single non-first
    token with maximal LLR (the optimizer needs a non-empty set). An answer
    of length 1 has no selectable token at all and raises DegenerateAnswer;
    the pipeline may then explicitly override with index 0.
    """
    if not report.records:
        raise ValueError("report has no records")
    if len(report.records) == 1:
        raise DegenerateAnswer("single-token answer: only token is the first token")
    selected = [r.index for r in report.records if r.index != 0 and r.llr > alpha_llr]
    if not selected:
        candidates = report.records[1:]
        best = max(candidates, key=lambda r: (r.llr, -r.index))
        selected = [best.index]
    return finalize_selection(report, selected)


def finalize_selection(report: RelevanceReport, selected: Sequence[int]) -> RelevanceReport:
    """Stamp a selection onto a report and fill the anchor scores."""
    sel = tuple(sorted(set(int(k) for k in selected)))
    if not sel:
        raise EmptySelection("selection must be non-empty")
    records = tuple(replace(r, selected=(r.index in sel)) for r in report.records)
    return RelevanceReport(
        records=records,
        sentence_llr=report.sentence_llr,
        selected_indices=sel,
        score_original=float(sum(records[k].logp_original for k in sel)),
        score_baseline=float(sum(records[k].logp_baseline for k in sel)),
    )


def prediction_score(
    adapter: ModelAdapter,
    image: Image,
    question: str,
    answer: Sequence[int],
    selected_indices: Sequence[int],
) -> float:
    """Cumulative log-likelihood of the selected tokens at the given image."""
    sel = sorted(set(int(k) for k in selected_indices))
    if not sel:
        raise EmptySelection("selected_indices must be non-empty")
    logps = adapter.conditional_logprobs(image, question, answer)
    return float(logps[sel].sum())


def joint_probability_score(
    adapter: ModelAdapter, image: Image, question: str, answer: Sequence[int]
) -> float:
    """Whole-sentence log-probability (the all-token ablation alternative)."""
    return float(adapter.conditional_logprobs(image, question, answer).sum())
