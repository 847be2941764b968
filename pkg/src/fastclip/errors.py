"""Exception types raised across the package."""


class FastClipError(Exception):
    pass


class DomainError(FastClipError, ValueError):
    """A scalar argument is outside its mathematical domain (e.g. tau <= 0)."""


class DegenerateBatchError(FastClipError, ValueError):
    """A contrast set is empty, or fewer than two pairs were supplied."""


class OwnershipError(FastClipError):
    """A worker tried to mutate state owned by another worker."""


class StalenessError(FastClipError):
    """A snapshot requested values that were not refreshed this iteration."""


class CollectiveShapeError(FastClipError, ValueError):
    pass


class NearZeroEmbeddingError(FastClipError, ArithmeticError):
    pass


class OptimizerError(FastClipError, ArithmeticError):
    pass


class ConfigError(FastClipError, ValueError):
    """Invalid configuration. ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class OracleError(FastClipError, ArithmeticError):
    pass
