"""Exception hierarchy. ``exit_code`` follows the CLI contract."""


class FedGBMError(Exception):
    exit_code = 1


class DataError(FedGBMError):
    exit_code = 2


class ConfigError(FedGBMError):
    exit_code = 2


class ConfigMismatchError(FedGBMError):
    exit_code = 3


class TransportError(FedGBMError):
    exit_code = 4


class ProtocolError(FedGBMError):
    """Malformed or unexpected frame; the session aborts."""
    exit_code = 4


class SecurityAbort(FedGBMError):
    exit_code = 5


class KeyMismatchError(FedGBMError):
    exit_code = 5


class EncodingRangeError(FedGBMError, ArithmeticError):
    pass


class MetricError(FedGBMError, ValueError):
    pass


class ModelError(FedGBMError):
    pass


class PredictionError(FedGBMError):
    pass
