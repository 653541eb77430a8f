"""Core data model: images, masks, token records, samples, configs, curves.

All types are immutable after construction (arrays are frozen read-only) and
validate their invariants eagerly, so instances can be shared freely across
worker threads. Serialization helpers keep float64 values bit-exact: JSON
round-trips floats through ``repr`` and arrays travel as ``.npy`` payloads
(see :mod:`openlens.artifacts`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import InvariantViolation
from .validation import check_mask_array, check_pixel_array, freeze

BASELINE_KINDS = ("blurred", "blank", "noise")
OPTIMIZATION_MODES = ("single_mask", "separate_masks")
CURVE_DIRECTIONS = ("deletion", "insertion")


@dataclass(frozen=True)
class Image:
    """Dense H x W x C intensity array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = check_pixel_array(self.pixels)
        object.__setattr__(self, "pixels", freeze(arr))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class BaselineImage:
    """A visually uninformative stand-in for an image.

    ``kind`` is one of ``blurred`` (Gaussian blur of the source), ``blank``
    (all zeros) or ``noise`` (uniform noise from ``seed``, reproducible).
    """

    pixels: np.ndarray
    kind: str
    seed: Optional[int] = None
    blur_sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise InvariantViolation(f"baseline kind {self.kind!r} not in {BASELINE_KINDS}")
        arr = check_pixel_array(self.pixels, "baseline pixels")
        if self.kind == "blank" and arr.max() != 0.0:
            raise InvariantViolation("blank baseline must be all zeros")
        if self.kind == "noise" and self.seed is None:
            raise InvariantViolation("noise baseline requires a recorded seed")
        object.__setattr__(self, "pixels", freeze(arr))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class Mask:
    """Dense H x W float array in [0, 1]; the optimization variable and the
    explanation artifact."""

    values: np.ndarray

    def __post_init__(self):
        arr = check_mask_array(self.values)
        object.__setattr__(self, "values", freeze(arr))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class TokenRecord:
    """One generated token with its conditional log-probabilities (nats)
    under the original and baseline images."""

    index: int
    token_id: int
    logp_original: float
    logp_baseline: float
    llr: float
    selected: bool = False

    def __post_init__(self):
        if self.index < 0:
            raise InvariantViolation("token index must be >= 0")
        for name in ("logp_original", "logp_baseline"):
            v = getattr(self, name)
            if not math.isfinite(v) or v > 0.0:
                raise InvariantViolation(f"{name} must be finite and <= 0")
        if self.llr != self.logp_original - self.logp_baseline:
            raise InvariantViolation("llr must equal logp_original - logp_baseline")
        if self.selected and self.index == 0:
            raise InvariantViolation("first answer token can never be selected")

    @classmethod
    def from_logps(cls, index, token_id, logp_original, logp_baseline, selected=False):
        return cls(
            index=index,
            token_id=token_id,
            logp_original=float(logp_original),
            logp_baseline=float(logp_baseline),
            llr=float(logp_original) - float(logp_baseline),
            selected=selected,
        )

    def to_jsonable(self) -> dict:
        return {
            "index": self.index,
            "token_id": self.token_id,
            "logp_original": self.logp_original,
            "logp_baseline": self.logp_baseline,
            "llr": self.llr,
            "selected": self.selected,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "TokenRecord":
        return cls(**d)


@dataclass(frozen=True)
class ScorableSample:
    """(image, question, answer tokens) triple; the unit of pipeline work.

    ``records`` is populated by the token-relevance pass and stays
    index-aligned 1:1 with ``answer_tokens``.
    """

    image: Image
    question: str
    answer_tokens: Tuple[int, ...]
    records: Optional[Tuple[TokenRecord, ...]] = None
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "answer_tokens", tuple(int(t) for t in self.answer_tokens))
        if self.records is not None:
            object.__setattr__(self, "records", tuple(self.records))

    def with_records(self, records: Sequence[TokenRecord]) -> "ScorableSample":
        return replace(self, records=tuple(records))


def validate_sample(sample: ScorableSample) -> ScorableSample:
    """Check every core-type invariant; return the sample unchanged.

    Raises :class:`InvariantViolation` naming the first failed invariant.
    """
    pix = np.asarray(sample.image.pixels)
    if pix.ndim != 3:
        raise InvariantViolation("pixel shape: expected H x W x C")
    if not np.all(np.isfinite(pix)):
        raise InvariantViolation("pixel range: non-finite values")
    if pix.min() < 0.0 or pix.max() > 1.0:
        raise InvariantViolation("pixel range: outside [0, 1]")
    if len(sample.answer_tokens) < 1:
        raise InvariantViolation("answer tokens: must be non-empty")
    if sample.records is not None:
        if len(sample.records) != len(sample.answer_tokens):
            raise InvariantViolation("record alignment: length mismatch")
        for pos, rec in enumerate(sample.records):
            if rec.index != pos:
                raise InvariantViolation("record alignment: index mismatch")
            if rec.token_id != sample.answer_tokens[pos]:
                raise InvariantViolation("record alignment: token id mismatch")
            if rec.llr != rec.logp_original - rec.logp_baseline:
                raise InvariantViolation("record llr: not the stored difference")
    return sample


@dataclass(frozen=True)
class OptimizationConfig:
    """Hyperparameters of the heatmap optimization.

    Defaults follow the reference setting: lambda1=1, lambda2=0.1,
    lambda3=10, exponential decay rate gamma=0.2.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 10.0
    gamma: float = 0.2
    alpha_llr: float = 1.0
    steps: int = 30
    step_size: float = 1.0
    mask_resolution: Tuple[int, int] = (28, 28)
    mode: str = "single_mask"
    seed: int = 0
    sigma_btv: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise InvariantViolation("lambda weights must be >= 0")
        if self.gamma <= 0:
            raise InvariantViolation("gamma must be > 0")
        if self.steps < 1:
            raise InvariantViolation("steps must be >= 1")
        if self.step_size <= 0:
            raise InvariantViolation("step_size must be > 0")
        h, w = self.mask_resolution
        if h < 1 or w < 1:
            raise InvariantViolation("mask_resolution entries must be >= 1")
        object.__setattr__(self, "mask_resolution", (int(h), int(w)))
        if self.mode not in OPTIMIZATION_MODES:
            raise InvariantViolation(f"mode {self.mode!r} not in {OPTIMIZATION_MODES}")
        if self.sigma_btv <= 0:
            raise InvariantViolation("sigma_btv must be > 0")

    def to_jsonable(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "gamma": self.gamma,
            "alpha_llr": self.alpha_llr,
            "steps": self.steps,
            "step_size": self.step_size,
            "mask_resolution": list(self.mask_resolution),
            "mode": self.mode,
            "seed": self.seed,
            "sigma_btv": self.sigma_btv,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "OptimizationConfig":
        d = dict(d)
        d["mask_resolution"] = tuple(d["mask_resolution"])
        return cls(**d)


@dataclass(frozen=True)
class EvaluationCurve:
    """Ordered (fraction perturbed, normalized score) pairs plus their AUC."""

    direction: str
    points: Tuple[Tuple[float, float], ...]
    auc: float

    def __post_init__(self):
        if self.direction not in CURVE_DIRECTIONS:
            raise InvariantViolation(f"direction {self.direction!r} not in {CURVE_DIRECTIONS}")
        pts = tuple((float(f), float(s)) for f, s in self.points)
        if len(pts) < 2:
            raise InvariantViolation("curve needs at least two points")
        fr = [p[0] for p in pts]
        if fr[0] != 0.0 or fr[-1] != 1.0 or any(b <= a for a, b in zip(fr, fr[1:])):
            raise InvariantViolation("fractions must increase strictly from 0 to 1")
        expected = float(np.trapezoid([p[1] for p in pts], fr))
        if abs(expected - self.auc) > 1e-9:
            raise InvariantViolation("auc must equal the trapezoidal integral")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, direction, fractions, scores) -> "EvaluationCurve":
        fractions = [float(f) for f in fractions]
        scores = [float(s) for s in scores]
        auc = float(np.trapezoid(scores, fractions))
        return cls(direction=direction, points=tuple(zip(fractions, scores)), auc=auc)

    def fractions(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    def scores(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def to_jsonable(self) -> dict:
        return {
            "direction": self.direction,
            "points": [list(p) for p in self.points],
            "auc": self.auc,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "EvaluationCurve":
        return cls(
            direction=d["direction"],
            points=tuple((f, s) for f, s in d["points"]),
            auc=d["auc"],
        )
