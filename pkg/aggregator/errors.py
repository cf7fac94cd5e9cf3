class AggregatorError(Exception):
    pass


class ArgumentError(AggregatorError, ValueError):
    pass


class ConfigurationError(AggregatorError):
    pass


class DecryptionError(AggregatorError):
    pass


class IntegrityError(AggregatorError):
    pass


class RoundError(AggregatorError):
    pass


class NumericalError(AggregatorError):
    pass


class FrameError(AggregatorError):
    pass


class TruncatedFrame(FrameError):
    pass


class OversizeFrame(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass
