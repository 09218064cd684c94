"""Exception taxonomy shared across the package."""


class MarlpipeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MarlpipeError):
    pass


class LengthMismatch(MarlpipeError):
    pass


class UnavailableAction(MarlpipeError):
    pass


class EpisodeFinished(MarlpipeError):
    pass


class TooLargeToEnumerate(MarlpipeError):
    pass


class IndexOutOfRange(MarlpipeError, IndexError):
    pass


class ChannelClosed(MarlpipeError):
    """Send on a closed channel, or receive on a closed and drained one."""


class QueueExhausted(MarlpipeError):
    """Sample queue is empty and every registered sender has closed."""


class AllActorsClosed(MarlpipeError):
    """Every pipe in a worker's pipe set is closed and drained."""


class SecondWriter(MarlpipeError):
    pass


class NoTapeRecorded(MarlpipeError):
    pass


class MalformedEpisode(MarlpipeError):
    pass


class NotEnoughData(MarlpipeError):
    pass


class NonFiniteLoss(MarlpipeError):
    pass


class RoleFailure(MarlpipeError):
    """A runtime role died; carries the role identity for diagnostics."""

    def __init__(self, role: str, cause: BaseException):
        super().__init__(f"{role} failed: {cause!r}")
        self.role = role
        self.cause = cause


class ConfigError(MarlpipeError):
    pass
