"""Exception hierarchy shared by every subsystem."""


class MetaNASError(Exception):
    """Base class for all errors raised by this package."""


class InvalidShapeError(MetaNASError, ValueError):
    pass


class InvalidLabelError(MetaNASError, ValueError):
    pass


class InvalidConfigError(MetaNASError, ValueError):
    pass


class InvalidArchitectureError(MetaNASError, ValueError):
    pass


class ArchitectureParseError(InvalidArchitectureError):
    """Raised when architecture text cannot be parsed.

    ``position`` is the zero-based index of the offending token.
    """

    def __init__(self, message, position):
        super().__init__(f"token {position}: {message}")
        self.position = position


class InvalidRewardError(MetaNASError, ValueError):
    pass


class InvalidBatchError(MetaNASError, ValueError):
    pass


class InvalidEpisodeError(MetaNASError, ValueError):
    pass


class InvalidPoolError(MetaNASError, ValueError):
    pass
