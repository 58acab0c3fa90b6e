"""Exception hierarchy shared by every fullvel module."""


class FullVelError(Exception):
    """Base class for all fullvel errors."""


class ValidationError(FullVelError, ValueError):
    """A value object or config failed its invariants."""


class NonPositiveDepth(FullVelError):
    pass


class DegenerateDirection(FullVelError):
    pass


class ZeroDt(FullVelError):
    pass


class OutOfBounds(FullVelError):
    pass


class InvalidFlow(FullVelError):
    pass


class IllConditioned(FullVelError):
    def __init__(self, condition_number: float):
        super().__init__(f"constraint matrix condition number {condition_number:.3g} exceeds limit")
        self.condition_number = condition_number


class AllNeighborsInvalid(FullVelError):
    pass


class ZeroVelocity(FullVelError):
    pass


class IdentityMismatch(FullVelError):
    pass


class MissingCorrespondence(FullVelError):
    pass


class MalformedFile(FullVelError):
    """A file could not be parsed; ``location`` names the line, record or byte offset."""

    def __init__(self, path, location: str, reason: str):
        super().__init__(f"{path}: {location}: {reason}")
        self.path = path
        self.location = location
        self.reason = reason


class BadMagic(MalformedFile):
    pass


class TruncatedFile(MalformedFile):
    pass


class DimensionMismatch(MalformedFile):
    pass
