"""Exception hierarchy shared by every stage of the registration toolkit."""


class RegistrationError(Exception):
    """Base class for all errors raised by relocreg."""


class EmptyInput(RegistrationError, ValueError):
    pass


class ParamError(RegistrationError, ValueError):
    pass


class IoError(RegistrationError, OSError):
    pass


class ParseError(RegistrationError, ValueError):
    """Malformed file content. ``location`` carries a line number or byte offset."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.location = location


class DegenerateGeometry(RegistrationError, ValueError):
    pass


class DegeneratePair(RegistrationError, ValueError):
    pass


class NoConsensus(RegistrationError):
    pass


class GridEmpty(RegistrationError):
    pass


class InsufficientOverlap(RegistrationError):
    """Too few ICP correspondences survived the distance cap.

    The best transform found before the failure is kept on ``transform`` so
    callers can continue from it.
    """

    def __init__(self, message, transform=None, rmse=float("nan"), iterations=0):
        super().__init__(message)
        self.transform = transform
        self.rmse = rmse
        self.iterations = iterations


class NotSalient(RegistrationError):
    """Neighborhood too small to evaluate; the point is skipped."""
