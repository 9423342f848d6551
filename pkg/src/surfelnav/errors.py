"""Exception types shared across the package."""


class SurfelNavError(Exception):
    pass


class InvalidInputError(SurfelNavError, ValueError):
    pass


class BehindCameraError(InvalidInputError):
    pass


class FormatError(SurfelNavError):
    """Malformed or inconsistent file content."""


class TrackingFailure(SurfelNavError):
    pass


class LocalizationFailure(SurfelNavError):
    pass


class DegenerateConfiguration(InvalidInputError):
    pass
