"""Python access to the lyaprobe C++ core."""

from ._core import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    Error,
    FormatError,
    IoError,
    NumericalError,
    Probe,
    TruncatedError,
    UndefinedMetricError,
    VersionError,
    auprc,
    delta_of,
    read_dump,
    run_cli,
    synth,
)

__all__ = [
    "BadMagicError",
    "ChecksumError",
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DimensionError",
    "Error",
    "FormatError",
    "IoError",
    "NumericalError",
    "Probe",
    "TruncatedError",
    "UndefinedMetricError",
    "VersionError",
    "auprc",
    "delta_of",
    "read_dump",
    "run_cli",
    "synth",
]
