class DDRError(Exception):
    pass


class InvalidCameraError(DDRError, ValueError):
    pass


class OutOfBoundsError(DDRError, IndexError):
    pass


class InvalidRayError(DDRError, ValueError):
    pass


class DomainError(DDRError, ValueError):
    pass


class ShapeMismatchError(DDRError, ValueError):
    pass


class MissingCacheError(DDRError, RuntimeError):
    pass


class DatasetError(DDRError, ValueError):
    pass


class TrainingAborted(DDRError, RuntimeError):
    """Raised when a loss component turns non-finite.

    ``component`` names the offending loss term.
    """

    def __init__(self, message, component=None, checkpoint=None):
        super().__init__(message)
        self.component = component
        self.checkpoint = checkpoint
