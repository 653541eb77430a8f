"""Error taxonomy for the openlens pipeline.

Every error raised by this package derives from :class:`OpenLensError` so
callers can catch pipeline failures without swallowing programming errors.
"""


class OpenLensError(Exception):
    """Base class for all openlens errors."""


class InvariantViolation(OpenLensError):
    """A core-type invariant does not hold (names the first failed check)."""


class ShapeMismatch(OpenLensError):
    """Array shapes disagree with each other or with an adapter contract."""


class EmptyGeneration(OpenLensError):
    """The model emitted an end token before producing any answer token."""


class NonFiniteLogProb(OpenLensError):
    """An adapter returned NaN/inf or a positive log-probability."""


class EmptySelection(OpenLensError):
    """A token index set that must be non-empty was empty."""


class DegenerateAnswer(OpenLensError):
    """The answer has a single token, so the first-token exclusion rule
    leaves nothing to select."""


class UnknownKind(OpenLensError):
    """Unrecognized baseline-image kind."""


class OutOfBounds(OpenLensError):
    """A crop rectangle extends beyond the image."""


class GradientUnsupported(OpenLensError):
    """The adapter declares supports_gradients=False but gradients were
    requested."""


class NonFiniteObjective(OpenLensError):
    """The optimization objective became NaN/inf; message names the step."""


class NormalizationDegenerate(OpenLensError):
    """Original and baseline scores coincide; the sample cannot anchor a
    normalized curve and should have been filtered out."""


class MismatchedSampleSets(OpenLensError):
    """Per-model reliance statistics do not cover the same sample ids."""


class MissingHeatmap(OpenLensError):
    """No heatmap artifact found for a manifest entry."""


class ConfigurationError(OpenLensError):
    """Bad CLI flags, unknown adapter, or unusable manifest (exit code 3)."""
