"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
ProviderError -> 3, numerical errors (NonFiniteError, ShapeMismatchError,
ContractError) -> 4.
"""


class AttackLabError(Exception):
    """Base class for all package errors."""


class ConfigError(AttackLabError):
    """Invalid or inconsistent configuration."""


class DataError(AttackLabError):
    """Missing or malformed data files (galleries, manifests, images)."""


class FormatError(DataError):
    """Malformed file contents; message carries a byte offset when known."""


class ShapeMismatchError(AttackLabError):
    """Tensor/array shape disagreement; message names both shapes."""


class NonFiniteError(AttackLabError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(AttackLabError):
    """A documented precondition was violated by the caller."""


class ProviderError(AttackLabError):
    """Remote provider failure after retries.

    ``status`` holds the last HTTP status code, or None for transport
    errors (timeouts, connection failures).
    """

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class ProviderFormatError(ProviderError):
    """Remote provider replied, but the payload could not be parsed.

    ``payload`` carries the raw reply text for diagnosis.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class JudgeFormatError(AttackLabError):
    """A remote judge reply was neither a yes nor a no."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload
