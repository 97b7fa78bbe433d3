"""Exception types raised across the pipeline."""


class ThinspectError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(ThinspectError):
    pass


class ParseError(ThinspectError):
    pass


class EmptyMesh(ThinspectError):
    pass


class SizeMismatch(ThinspectError):
    pass


class BehindCamera(ThinspectError):
    pass


class PinNotVisible(ThinspectError):
    pass


class NoFeasiblePose(ThinspectError):
    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates or []


class TooFewEdges(ThinspectError):
    pass


class OutOfBounds(ThinspectError):
    pass


class NoMatch(ThinspectError):
    pass


class NoSeparation(ThinspectError):
    pass


class InvalidSpec(ThinspectError):
    pass


class UnknownPin(ThinspectError):
    pass


class ArtifactError(ThinspectError):
    """Setup artifact missing, corrupt or of an unsupported version."""
