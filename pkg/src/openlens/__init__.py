"""openlens: saliency heatmaps for open-ended answers of autoregressive
vision-language models.

The pipeline scores each generated token against a visually uninformative
baseline image, selects the tokens that actually depend on the image, and
optimizes a per-pixel mask whose deviation from the unperturbed image
explains those tokens. Heatmaps are evaluated with normalized
deletion/insertion AUC.
"""

from .adapters import AdapterInfo, ModelAdapter, ToyModel, make_adapter, register_adapter
from .evaluation import (
    ComparisonScores,
    RelianceStats,
    compare_heatmaps,
    filter_vision_dependent,
    normalize_score,
    perturbation_curve,
    reliance_stats,
)
from .exceptions import (
    ConfigurationError,
    DegenerateAnswer,
    EmptyGeneration,
    EmptySelection,
    GradientUnsupported,
    InvariantViolation,
    MismatchedSampleSets,
    MissingHeatmap,
    NonFiniteLogProb,
    NonFiniteObjective,
    NormalizationDegenerate,
    OpenLensError,
    OutOfBounds,
    ShapeMismatch,
    UnknownKind,
)
from .masking import (
    CropLayout,
    apply_mask,
    apply_mask_multiencoder,
    crop_mask_multires,
    crop_multires,
    default_crop_layout,
    make_baseline,
    upsample_mask,
)
from .optimizer import (
    MaskExplainer,
    ObjectiveBreakdown,
    OptimizationTrace,
    btv_norm,
    objective_separate,
    objective_separate_grad,
    objective_single,
    objective_single_grad,
    optimize_separate_masks,
    optimize_single_mask,
)
from .relevance import (
    RelevanceReport,
    compute_llr,
    joint_probability_score,
    prediction_score,
    select_crucial_tokens,
)
from .types import (
    BaselineImage,
    EvaluationCurve,
    Image,
    Mask,
    OptimizationConfig,
    ScorableSample,
    TokenRecord,
    validate_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterInfo",
    "BaselineImage",
    "ComparisonScores",
    "ConfigurationError",
    "CropLayout",
    "DegenerateAnswer",
    "EmptyGeneration",
    "EmptySelection",
    "EvaluationCurve",
    "GradientUnsupported",
    "Image",
    "InvariantViolation",
    "Mask",
    "MaskExplainer",
    "MismatchedSampleSets",
    "MissingHeatmap",
    "ModelAdapter",
    "NonFiniteLogProb",
    "NonFiniteObjective",
    "NormalizationDegenerate",
    "ObjectiveBreakdown",
    "OpenLensError",
    "OptimizationConfig",
    "OptimizationTrace",
    "OutOfBounds",
    "RelevanceReport",
    "RelianceStats",
    "ScorableSample",
    "ShapeMismatch",
    "TokenRecord",
    "ToyModel",
    "UnknownKind",
    "apply_mask",
    "apply_mask_multiencoder",
    "btv_norm",
    "compare_heatmaps",
    "compute_llr",
    "crop_mask_multires",
    "crop_multires",
    "default_crop_layout",
    "filter_vision_dependent",
    "joint_probability_score",
    "make_adapter",
    "make_baseline",
    "normalize_score",
    "objective_separate",
    "objective_separate_grad",
    "objective_single",
    "objective_single_grad",
    "optimize_separate_masks",
    "optimize_single_mask",
    "perturbation_curve",
    "prediction_score",
    "register_adapter",
    "reliance_stats",
    "select_crucial_tokens",
    "upsample_mask",
    "validate_sample",
]
