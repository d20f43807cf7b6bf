"""
Exception types shared by every progattn module. The command line front end maps
these onto stable process exit codes, see `progattn.cli`.
"""


def _collapse_str_(x: str) -> str:
    return " ".join(x.split())


class ProgAttnError(RuntimeError):
    """Base class for all errors raised by the package"""


class ShapeError(ProgAttnError, ValueError):
    """Tensor/vector dimensions that do not agree"""


class ContractError(ProgAttnError):
    """A documented precondition of an operation was violated by the caller"""


class ConfigError(ProgAttnError, ValueError):
    """Invalid configuration or parameter values"""


class NumericalError(ProgAttnError, ArithmeticError):
    """An operation would have produced NaN or Inf values"""


class TrainingError(ProgAttnError):
    """Failure during optimization, such as non-finite gradients"""


class LoadError(ProgAttnError):
    """Malformed dataset, manifest, montage or checkpoint files"""
