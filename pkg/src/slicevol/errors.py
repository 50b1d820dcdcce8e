"""Exception types shared across the toolkit."""


class SlicevolError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SlicevolError, ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """A file does not follow the expected binary or text layout."""


class LengthError(FormatError):
    """A file payload is shorter or longer than its header declares."""


class TrainingError(SlicevolError, RuntimeError):
    """Every training run diverged."""


class RegistrationError(SlicevolError, RuntimeError):
    """Too many registrations failed for a score to be meaningful."""
