class OITSplatError(Exception):
    pass


class InvalidParameterError(OITSplatError, ValueError):
    """A numeric input was non-finite or outside its domain."""


class ContractViolation(OITSplatError, RuntimeError):
    """A caller broke a precondition (shape mismatch, stale cache, ...)."""


class DatasetError(OITSplatError, IOError):
    """Dataset ingestion failed; the message names the offending path."""
