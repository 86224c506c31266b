"""Exception types raised across the package."""


class FormatError(ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OutOfDomain(ValueError):
    """A pixel query outside the region where the quantity is defined (e.g. a border pixel)."""


class NoWitness(ValueError):
    """No low/high contrast pixel pair exists for the requested bounds."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class InvalidState(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class AttackDiverged(RuntimeError):
    """Non-finite attack objective; ``last_params`` holds the last finite iterate."""

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params
