"""Exception types shared across the pipeline."""


class RcadError(Exception):
    """Base class for all pipeline errors."""


class AnomalyPlacementError(RcadError):
    """The object is too small to host an anomaly of the requested size."""


class MaskNotFound(RcadError):
    """No segmentation proposal matched the selection rule."""


class StrategyMisuse(RcadError):
    """A mask strategy was applied to an image it cannot handle."""


class NonConvergence(RcadError):
    """An optimisation loop failed its probe-loss improvement criterion."""


class IncompatibleArtifacts(RcadError):
    """Memory, denoiser and codec hashes do not line up."""


class ContainerError(RcadError):
    """A binary container is truncated, corrupt or of the wrong version."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class AccessViolation(RcadError):
    """A protocol stage tried to read raw data it is not allowed to see."""


class FrozenWeightsModified(RcadError):
    """A frozen network changed during an operation that must not touch it."""


class StorageBudgetExceeded(RcadError):
    """A serialized class memory is larger than the configured share of its raw data."""
