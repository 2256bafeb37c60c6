"""Exception hierarchy shared by all pumpwatch modules."""


class PumpwatchError(Exception):
    """Base class. The CLI maps these to exit code 2 (data/validation error)."""


# panel
class MalformedRow(PumpwatchError):
    def __init__(self, row_number: int, reason: str):
        super().__init__(f"row {row_number}: {reason}")
        self.row_number = row_number


class DuplicateTimestamp(PumpwatchError):
    pass


class EventOffGrid(PumpwatchError):
    pass


class PanelTooShort(PumpwatchError):
    pass


class HttpError(PumpwatchError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]!r}")
        self.status = status
        self.body = body


class RateLimited(HttpError):
    def __init__(self, status: int, body: str, retry_after: float | None):
        super().__init__(status, body)
        self.retry_after = retry_after


# features
class WindowTooLarge(PumpwatchError):
    pass


class InsufficientHistory(PumpwatchError):
    pass


# graphcraft
class TooFewSamples(PumpwatchError):
    pass


class WindowEmpty(PumpwatchError):
    pass


# numcore
class ShapeMismatch(PumpwatchError, ValueError):
    pass


class NonScalarLoss(PumpwatchError, ValueError):
    pass


class MissingGrad(PumpwatchError):
    pass


# stgnn
class BadEdgeIndex(PumpwatchError, IndexError):
    pass


# trainer / metrics
class EmptyBatch(PumpwatchError):
    pass


class NoPositivesInTrain(PumpwatchError):
    pass


class NoPositives(PumpwatchError):
    pass


# synthmarket
class ConfigInfeasible(PumpwatchError):
    pass


class ConfigError(PumpwatchError):
    """Unknown or unparsable configuration key."""


class UnknownKey(ConfigError):
    def __init__(self, unknown, valid):
        self.unknown = tuple(unknown)
        self.valid = tuple(valid)
        super().__init__(f"unknown key(s) {', '.join(self.unknown)}; valid keys: {', '.join(self.valid)}")
