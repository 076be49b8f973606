"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code so command wrappers can translate
failures uniformly (see cli.EXIT_CODES).
"""


class PfcpganError(Exception):
    """Base class for all package errors."""


class ConfigError(PfcpganError):
    """Invalid configuration value, unknown config key, or bad CLI usage."""


class DataError(PfcpganError):
    """Dataset cannot support the requested operation (too small, missing domain)."""


class IngestionError(PfcpganError):
    """On-disk dataset is malformed; message names the offending path."""


class DimensionError(PfcpganError):
    """Array shape incompatible with the configured model."""


class NumericError(PfcpganError):
    """Non-finite value where a finite one is required."""


class ProtocolError(PfcpganError):
    """Evaluation protocol violated (single-class scores, missing gallery subject...)."""


class CheckpointError(PfcpganError):
    """Checkpoint unreadable: digest mismatch, version mismatch, or missing arrays."""
