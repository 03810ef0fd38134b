"""Exception types raised across the package."""


class MPKError(Exception):
    """Base class for all package errors."""


class IndexOutOfRange(MPKError, IndexError):
    pass


class DegenerateFace(MPKError, ValueError):
    pass


class AtlasLengthMismatch(MPKError, ValueError):
    pass


class InvalidBarycentric(MPKError, ValueError):
    pass


class EmptyTopology(MPKError, ValueError):
    pass


class DisconnectedVertices(MPKError, ValueError):
    pass


class ShapeMismatch(MPKError, ValueError):
    pass


class NonFiniteInput(MPKError, ValueError):
    pass


class VisibilityOutOfRange(MPKError, ValueError):
    pass


class NoLabeledVertices(MPKError, ValueError):
    pass


class MissingComponent(MPKError, KeyError):
    pass


class DegenerateConfiguration(MPKError, ValueError):
    pass


class NoInstances(MPKError, ValueError):
    pass


class EmptyInstance(MPKError, ValueError):
    pass


class EmptyDataset(MPKError, ValueError):
    pass


class DivergedTraining(MPKError, RuntimeError):
    pass


class UnboundVertex(MPKError, ValueError):
    pass


class NoVisibleSurface(MPKError, ValueError):
    pass


class InvalidConfig(MPKError, ValueError):
    pass


class MissingPredictions(MPKError, FileNotFoundError):
    pass


class FormatError(MPKError, ValueError):
    """Malformed file contents (tensor, mask or mesh files)."""


class DegenerateTriangleWarning(UserWarning):
    pass
