"""Exception types shared across the package."""


class NoduleGenError(Exception):
    """Base class for all package errors."""


class EmptyNodule(NoduleGenError):
    """A grid has no on-voxels at the working threshold."""


class MultiComponent(NoduleGenError):
    """A grid that must be single-component has several components."""


class DimensionMismatch(NoduleGenError):
    """Grid or vector sizes do not line up."""


class ShapeMismatch(NoduleGenError):
    """Parameter and gradient/moment shapes do not line up."""


class EmptySet(NoduleGenError):
    """A metric was asked to summarize an empty collection."""


class DegenerateAcceptance(NoduleGenError):
    """Acceptance rate of 1 makes the composite score unbounded."""
