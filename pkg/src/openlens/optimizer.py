"""Heatmap optimization: single-mask objective with graduated non-convexity,
plus the two-mask variant kept as an ablation mode.

The optimization variable is the keep-mask K in [0,1]: K=1 keeps the
original pixel, K=0 replaces it with the baseline. The objective

    f(blend(K)) - f(blend(1-K)) + lam1*mean|1-K| + lam2*exp(-gamma*t)*rms(1-K)
        + lam3*BTV(K)

is minimized by projected gradient descent with a backtracking line search
(step halved on any objective increase; the decayed-L2 factor is frozen
within one search). The exponentially decayed L2 term starts the search
near a convex surrogate and anneals it away, which is what stabilizes the
otherwise oscillation-prone non-convex descent. The descent carves K below
1 exactly where the selected-token score depends on the pixels, so the
explanation heatmap returned to callers is the deviation 1-K: high where
the answer relies on the image.

In separate-masks mode two keep-masks are optimized jointly under the
four-term objective with combined mask K = Kx*Ky; there the L2/GNC term is
absent and lambda2 weights the BTV norm instead (that mode's convention).

L1 and L2 are mean-normalized over mask pixels so the default weights are
independent of the mask resolution; BTV is a plain sum over neighbor pairs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .adapters import ModelAdapter
from .exceptions import (
    ConfigurationError,
    DegenerateAnswer,
    GradientUnsupported,
    NonFiniteObjective,
    ShapeMismatch,
)
from .masking import make_baseline, resize_plane, resize_plane_adjoint
from .relevance import (
    RelevanceReport,
    compute_llr,
    finalize_selection,
    prediction_score,
    select_crucial_tokens,
)
from .types import (
    BaselineImage,
    Image,
    Mask,
    OptimizationConfig,
    ScorableSample,
    validate_sample,
)

logger = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 10
CONVERGENCE_RTOL = 1e-5
MAX_HALVINGS = 30


# -- regularizers -------------------------------------------------------------


def _as_mask_values(mask) -> np.ndarray:
    values = mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeMismatch(f"mask must be 2D, got shape {values.shape}")
    return values


def _gray_at(image, shape: Tuple[int, int]) -> np.ndarray:
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    gray = pixels.mean(axis=2) if pixels.ndim == 3 else pixels
    if gray.ndim != 2:
        raise ShapeMismatch(f"image must be 2D or 3D, got shape {pixels.shape}")
    if gray.shape == tuple(shape):
        return gray
    return resize_plane(gray, shape)


def _btv_weights(gray: np.ndarray, sigma_btv: float):
    wh = np.exp(-((gray[:, 1:] - gray[:, :-1]) ** 2) / sigma_btv**2)
    wv = np.exp(-((gray[1:, :] - gray[:-1, :]) ** 2) / sigma_btv**2)
    return wh, wv


def btv_norm(mask, image, sigma_btv: float = 0.1) -> float:
    """Bilateral total variation: sum over 4-neighbor pairs of
    w_ij * (M_i - M_j)^2 with w_ij = exp(-(gray_i - gray_j)^2 / sigma^2).

    The image (channel-meaned, downsampled to the mask grid if needed)
    provides the weights, so the penalty tolerates mask edges that follow
    image edges. Zero iff the mask is constant.
    """
    values = _as_mask_values(mask)
    gray = _gray_at(image, values.shape)
    wh, wv = _btv_weights(gray, sigma_btv)
    dh = values[:, 1:] - values[:, :-1]
    dv = values[1:, :] - values[:-1, :]
    return float((wh * dh**2).sum() + (wv * dv**2).sum())


def _btv_grad(values: np.ndarray, gray: np.ndarray, sigma_btv: float) -> np.ndarray:
    wh, wv = _btv_weights(gray, sigma_btv)
    dh = values[:, 1:] - values[:, :-1]
    dv = values[1:, :] - values[:-1, :]
    g = np.zeros_like(values)
    g[:, 1:] += 2.0 * wh * dh
    g[:, :-1] -= 2.0 * wh * dh
    g[1:, :] += 2.0 * wv * dv
    g[:-1, :] -= 2.0 * wv * dv
    return g


def _l1_mean(values: np.ndarray) -> float:
    return float(np.abs(1.0 - values).mean())


def _l2_rms(values: np.ndarray) -> float:
    return float(np.sqrt(((1.0 - values) ** 2).mean()))


# -- objective ----------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """One objective evaluation split into its terms (weights not applied to
    the stored regularizer values; ``total`` carries the weighted sum)."""

    step: int
    deletion_term: float
    insertion_term: float
    l1: float
    l2_decayed: float
    btv: float
    total: float

    def to_jsonable(self) -> dict:
        return {
            "step": self.step,
            "deletion_term": self.deletion_term,
            "insertion_term": self.insertion_term,
            "l1": self.l1,
            "l2_decayed": self.l2_decayed,
            "btv": self.btv,
            "total": self.total,
        }


class _Workspace:
    """Per-sample precomputation shared by objective and gradient calls."""

    def __init__(self, adapter, sample, baseline, selected_indices, config):
        if sample.image.shape != baseline.shape:
            raise ShapeMismatch(
                f"baseline {baseline.shape} does not match image {sample.image.shape}"
            )
        self.adapter = adapter
        self.sample = sample
        self.baseline_pixels = baseline.pixels
        self.diff = sample.image.pixels - baseline.pixels
        self.selected = tuple(sorted(set(int(k) for k in selected_indices)))
        self.config = config
        self.image_hw = (sample.image.height, sample.image.width)
        self.gray_low = _gray_at(sample.image, config.mask_resolution)

    def blend(self, up: np.ndarray) -> Image:
        pixels = self.baseline_pixels + self.diff * up[:, :, None]
        return Image(np.clip(pixels, 0.0, 1.0))

    def score(self, up: np.ndarray) -> float:
        return prediction_score(
            self.adapter, self.blend(up), self.sample.question,
            self.sample.answer_tokens, self.selected,
        )

    def score_grad_lowres(self, up: np.ndarray) -> np.ndarray:
        """Pull d f / d pixels back to the low-res mask grid through the
        blend and the bilinear upsampling."""
        gpix = self.adapter.score_gradient(
            self.blend(up), self.sample.question, self.sample.answer_tokens, self.selected
        )
        spatial = (gpix * self.diff).sum(axis=2)
        return resize_plane_adjoint(spatial, self.config.mask_resolution)

    def upsample(self, values: np.ndarray) -> np.ndarray:
        return resize_plane(values, self.image_hw)


def objective_single(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    mask,
    selected_indices: Sequence[int],
    config: OptimizationConfig,
    step: int = 0,
) -> ObjectiveBreakdown:
    """Evaluate the single-mask objective at a keep-mask (exactly two
    teacher-forced scoring calls)."""
    ws = _Workspace(adapter, sample, baseline, selected_indices, config)
    return _single_breakdown(ws, _as_mask_values(mask), step)


def _single_breakdown(ws: _Workspace, values: np.ndarray, step: int) -> ObjectiveBreakdown:
    cfg = ws.config
    up = ws.upsample(values)
    deletion = ws.score(up)
    insertion = ws.score(1.0 - up)
    l1 = _l1_mean(values)
    l2_decayed = float(np.exp(-cfg.gamma * step)) * _l2_rms(values)
    btv = btv_norm(values, ws.gray_low, cfg.sigma_btv)
    total = (
        deletion - insertion + cfg.lambda1 * l1 + cfg.lambda2 * l2_decayed + cfg.lambda3 * btv
    )
    return ObjectiveBreakdown(
        step=step,
        deletion_term=deletion,
        insertion_term=insertion,
        l1=l1,
        l2_decayed=l2_decayed,
        btv=btv,
        total=total,
    )


def objective_single_grad(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    mask,
    selected_indices: Sequence[int],
    config: OptimizationConfig,
    step: int = 0,
) -> np.ndarray:
    """Analytic gradient of the single-mask objective w.r.t. the low-res mask."""
    ws = _Workspace(adapter, sample, baseline, selected_indices, config)
    return _single_grad(ws, _as_mask_values(mask), step)


def _single_grad(ws: _Workspace, values: np.ndarray, step: int) -> np.ndarray:
    cfg = ws.config
    up = ws.upsample(values)
    g = ws.score_grad_lowres(up) + ws.score_grad_lowres(1.0 - up)
    n = values.size
    g += cfg.lambda1 * (-np.sign(1.0 - values) / n)
    l2 = _l2_rms(values)
    if l2 > 1e-12:
        g += cfg.lambda2 * np.exp(-cfg.gamma * step) * (-(1.0 - values) / (n * l2))
    g += cfg.lambda3 * _btv_grad(values, ws.gray_low, cfg.sigma_btv)
    return g


def objective_separate(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    mask_x,
    mask_y,
    selected_indices: Sequence[int],
    config: OptimizationConfig,
    step: int = 0,
) -> ObjectiveBreakdown:
    """Evaluate the two-mask objective (four scoring calls): deletion terms
    on Kx and K=Kx*Ky, insertion terms on their complements, with
    lambda1*L1 + lambda2*BTV on the combined mask."""
    ws = _Workspace(adapter, sample, baseline, selected_indices, config)
    return _separate_breakdown(ws, _as_mask_values(mask_x), _as_mask_values(mask_y), step)


def _separate_breakdown(ws, kx: np.ndarray, ky: np.ndarray, step: int) -> ObjectiveBreakdown:
    cfg = ws.config
    combined = kx * ky
    up_x = ws.upsample(kx)
    up_y = ws.upsample(ky)
    up_k = ws.upsample(combined)
    deletion = ws.score(up_x) + ws.score(up_k)
    insertion = ws.score(1.0 - up_y) + ws.score(1.0 - up_k)
    l1 = _l1_mean(combined)
    btv = btv_norm(combined, ws.gray_low, cfg.sigma_btv)
    # This mode has no decayed-L2/GNC term; lambda2 weights BTV here.
    total = deletion - insertion + cfg.lambda1 * l1 + cfg.lambda2 * btv
    return ObjectiveBreakdown(
        step=step,
        deletion_term=deletion,
        insertion_term=insertion,
        l1=l1,
        l2_decayed=0.0,
        btv=btv,
        total=total,
    )


def objective_separate_grad(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    mask_x,
    mask_y,
    selected_indices: Sequence[int],
    config: OptimizationConfig,
    step: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    ws = _Workspace(adapter, sample, baseline, selected_indices, config)
    return _separate_grad(ws, _as_mask_values(mask_x), _as_mask_values(mask_y), step)


def _separate_grad(ws, kx: np.ndarray, ky: np.ndarray, step: int):
    cfg = ws.config
    combined = kx * ky
    up_x = ws.upsample(kx)
    up_y = ws.upsample(ky)
    up_k = ws.upsample(combined)
    a_del_x = ws.score_grad_lowres(up_x)
    a_ins_y = ws.score_grad_lowres(1.0 - up_y)
    a_del_k = ws.score_grad_lowres(up_k)
    a_ins_k = ws.score_grad_lowres(1.0 - up_k)
    shared = a_del_k + a_ins_k
    n = combined.size
    g_comb = cfg.lambda1 * (-np.sign(1.0 - combined) / n)
    g_comb += cfg.lambda2 * _btv_grad(combined, ws.gray_low, cfg.sigma_btv)
    gx = a_del_x + (shared + g_comb) * ky
    gy = a_ins_y + (shared + g_comb) * kx
    return gx, gy


# -- optimization loop --------------------------------------------------------


@dataclass
class OptimizationTrace:
    """Per-step objective breakdowns plus the resulting masks.

    ``final_mask`` is the explanation heatmap at image resolution (high
    where the answer relies on the image, i.e. the deviation 1-K of the
    optimized keep-mask). ``keep_masks`` holds the low-res keep-mask after
    each step so every entry can be audited against a recomputation;
    ``variable_pairs`` holds (Kx, Ky) per step in separate-masks mode.
    Snapshots stay in memory; JSONL serialization is one breakdown per line.
    """

    entries: List[ObjectiveBreakdown]
    final_mask: Mask
    final_mask_lowres: Mask
    converged: bool
    wall_time: float
    keep_masks: List[np.ndarray] = field(default_factory=list, repr=False)
    variable_pairs: Optional[List[Tuple[np.ndarray, np.ndarray]]] = field(
        default=None, repr=False
    )

    def totals(self) -> np.ndarray:
        return np.array([e.total for e in self.entries])

    def to_jsonl(self) -> str:
        import json

        return "\n".join(json.dumps(e.to_jsonable(), sort_keys=True) for e in self.entries)


def _has_converged(totals: List[float]) -> bool:
    if len(totals) < CONVERGENCE_WINDOW + 1:
        return False
    recent = totals[-(CONVERGENCE_WINDOW + 1):]
    scale = max(1.0, abs(recent[-1]))
    return (max(recent) - min(recent)) < CONVERGENCE_RTOL * scale


def _descend(
    objective: Callable[[List[np.ndarray], int], ObjectiveBreakdown],
    gradient: Callable[[List[np.ndarray], int], List[np.ndarray]],
    variables: List[np.ndarray],
    config: OptimizationConfig,
):
    """Projected gradient descent with backtracking (halve the step on any
    objective increase; the GNC decay factor is frozen within one search)."""
    entries: List[ObjectiveBreakdown] = []
    snapshots: List[List[np.ndarray]] = []
    totals: List[float] = []
    converged = False
    for t in range(config.steps):
        ref = objective(variables, t)
        if not np.isfinite(ref.total):
            raise NonFiniteObjective(f"objective non-finite at step {t}")
        grads = gradient(variables, t)
        step_size = config.step_size
        accepted = None
        for _ in range(MAX_HALVINGS):
            cand = [np.clip(v - step_size * g, 0.0, 1.0) for v, g in zip(variables, grads)]
            cand_entry = objective(cand, t)
            if not np.isfinite(cand_entry.total):
                step_size *= 0.5
                continue
            if cand_entry.total <= ref.total:
                accepted = (cand, cand_entry)
                break
            step_size *= 0.5
        if accepted is None:
            cand, cand_entry = variables, ref
        else:
            cand, cand_entry = accepted
        variables = cand
        entries.append(cand_entry)
        snapshots.append([v.copy() for v in variables])
        totals.append(cand_entry.total)
        if _has_converged(totals):
            converged = True
            break
    return variables, entries, snapshots, converged


def _require_gradients(adapter: ModelAdapter) -> None:
    if not adapter.supports_gradients:
        raise GradientUnsupported(f"adapter {adapter.name!r} does not expose gradients")


def optimize_single_mask(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    selected_indices: Sequence[int],
    config: OptimizationConfig,
) -> OptimizationTrace:
    """Optimize the single keep-mask (initialized to all ones) and return
    the trace with the explanation heatmap 1-K."""
    if config.mode != "single_mask":
        raise ConfigurationError(f"config.mode is {config.mode!r}, expected 'single_mask'")
    _require_gradients(adapter)
    ws = _Workspace(adapter, sample, baseline, selected_indices, config)
    start = time.perf_counter()
    init = [np.ones(config.mask_resolution)]
    variables, entries, snapshots, converged = _descend(
        lambda v, t: _single_breakdown(ws, v[0], t),
        lambda v, t: [_single_grad(ws, v[0], t)],
        init,
        config,
    )
    elapsed = time.perf_counter() - start
    keep = variables[0]
    saliency_low = 1.0 - keep
    heatmap = np.clip(ws.upsample(saliency_low), 0.0, 1.0)
    return OptimizationTrace(
        entries=entries,
        final_mask=Mask(heatmap),
        final_mask_lowres=Mask(saliency_low),
        converged=converged,
        wall_time=elapsed,
        keep_masks=[s[0] for s in snapshots],
    )


def optimize_separate_masks(
    adapter: ModelAdapter,
    sample: ScorableSample,
    baseline: BaselineImage,
    selected_indices: Sequence[int],
    config: OptimizationConfig,
) -> OptimizationTrace:
    """Jointly optimize deletion/insertion keep-masks; heatmap is 1-Kx*Ky."""
    if config.mode != "separate_masks":
        raise ConfigurationError(f"config.mode is {config.mode!r}, expected 'separate_masks'")
    _require_gradients(adapter)
    ws = _Workspace(adapter, sample, baseline, selected_indices, config)
    start = time.perf_counter()
    init = [np.ones(config.mask_resolution), np.ones(config.mask_resolution)]
    variables, entries, snapshots, converged = _descend(
        lambda v, t: _separate_breakdown(ws, v[0], v[1], t),
        lambda v, t: list(_separate_grad(ws, v[0], v[1], t)),
        init,
        config,
    )
    elapsed = time.perf_counter() - start
    combined = variables[0] * variables[1]
    saliency_low = 1.0 - combined
    heatmap = np.clip(ws.upsample(saliency_low), 0.0, 1.0)
    return OptimizationTrace(
        entries=entries,
        final_mask=Mask(heatmap),
        final_mask_lowres=Mask(saliency_low),
        converged=converged,
        wall_time=elapsed,
        keep_masks=[s[0] * s[1] for s in snapshots],
        variable_pairs=[(s[0], s[1]) for s in snapshots],
    )


# -- estimator ----------------------------------------------------------------


class MaskExplainer(BaseEstimator):
    """Per-sample saliency explainer with the scikit-learn estimator API.

    ``fit`` runs the whole pipeline on one sample: build the baseline
    image, score tokens against it, select the crucial ones, optimize the
    mask. Hyperparameters are plain constructor arguments so the sweep
    harness can ``clone`` + ``set_params``.

    Fitted attributes: ``heatmap_`` (H x W saliency in [0,1]), ``trace_``,
    ``report_``, ``selected_indices_``, ``baseline_``, ``config_``.
    """

    def __init__(
        self,
        adapter: Optional[ModelAdapter] = None,
        lambda1: float = 1.0,
        lambda2: float = 0.1,
        lambda3: float = 10.0,
        gamma: float = 0.2,
        alpha_llr: float = 1.0,
        steps: int = 30,
        step_size: float = 1.0,
        mask_resolution: Tuple[int, int] = (28, 28),
        mode: str = "single_mask",
        baseline: str = "blurred",
        blur_sigma: float = 10.0,
        sigma_btv: float = 0.1,
        seed: int = 0,
    ):
        self.adapter = adapter
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.gamma = gamma
        self.alpha_llr = alpha_llr
        self.steps = steps
        self.step_size = step_size
        self.mask_resolution = mask_resolution
        self.mode = mode
        self.baseline = baseline
        self.blur_sigma = blur_sigma
        self.sigma_btv = sigma_btv
        self.seed = seed

    def build_config(self) -> OptimizationConfig:
        return OptimizationConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            gamma=self.gamma,
            alpha_llr=self.alpha_llr,
            steps=self.steps,
            step_size=self.step_size,
            mask_resolution=tuple(self.mask_resolution),
            mode=self.mode,
            seed=self.seed,
            sigma_btv=self.sigma_btv,
        )

    def fit(self, sample: ScorableSample, y=None) -> "MaskExplainer":
        if self.adapter is None:
            raise ConfigurationError("MaskExplainer needs an adapter")
        sample = validate_sample(sample)
        config = self.build_config()
        baseline = make_baseline(
            sample.image, self.baseline, blur_sigma=self.blur_sigma, seed=self.seed
        )
        report = compute_llr(self.adapter, sample, baseline)
        try:
            report = select_crucial_tokens(report, config.alpha_llr)
            selected = report.selected_indices
        except DegenerateAnswer:
            # Single-token answers are still explained, using that token.
            logger.warning(
                "sample %s: single-token answer, explaining the first token",
                sample.sample_id or "<unnamed>",
            )
            selected = (0,)
            first = report.records[0]
            report = RelevanceReport(
                records=report.records,
                sentence_llr=report.sentence_llr,
                selected_indices=(),
                score_original=first.logp_original,
                score_baseline=first.logp_baseline,
            )
        if config.mode == "single_mask":
            trace = optimize_single_mask(self.adapter, sample, baseline, selected, config)
        else:
            trace = optimize_separate_masks(self.adapter, sample, baseline, selected, config)
        self.sample_ = sample
        self.config_ = config
        self.baseline_ = baseline
        self.report_ = report
        self.selected_indices_ = tuple(selected)
        self.trace_ = trace
        self.heatmap_ = trace.final_mask
        return self

    def explain(self, sample: ScorableSample) -> Mask:
        """Fit on one sample and return its saliency heatmap."""
        return self.fit(sample).heatmap_
