"""Exception types shared across the package."""


class StormensError(Exception):
    """Base class for all package errors."""


class OutOfDomain(StormensError):
    """A coarse cell footprint does not fit inside the fine grid."""


class KeyOutOfRange(StormensError):
    """Lookup key outside a table's valid range."""


class EmptyArchive(StormensError):
    pass


class DegenerateSample(StormensError):
    """Normalizer fit with zero spread (std=0 or max=min)."""


class NegativeLogInput(StormensError):
    pass


class ShapeMismatch(StormensError):
    pass


class WrongWindowArity(StormensError):
    """Classifier fed a number of lead-hour features outside {2, 3, 4}."""


class NoPositiveSamples(StormensError):
    pass


class CheckpointMismatch(StormensError):
    """Checkpoints trained with different normalizer statistics."""


class NonFiniteLoss(StormensError):
    pass


class LengthMismatch(StormensError):
    pass


class ZeroClimatologyVariance(StormensError):
    pass


class EmptyInput(StormensError):
    pass


class SingleMemberEnsemble(StormensError):
    pass


class EmptyAfterDiscard(StormensError):
    pass


class ZeroVariance(StormensError):
    pass


class UnknownPredictor(StormensError):
    pass


class UnknownMethod(StormensError):
    pass


class MissingMetric(StormensError):
    pass


class BundleError(StormensError):
    """Array container file is malformed or inconsistent with its manifest."""


class ConfigError(StormensError):
    pass


class StageFailure(StormensError):
    """A pipeline stage failed; partial outputs are left in place."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
