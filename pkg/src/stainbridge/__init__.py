"""stainbridge: H&E to multiplex IHC (DAPI/CD3/panCK) translation toolkit."""

from stainbridge.errors import (
    ConfigurationError,
    DatasetValidationError,
    InputValidationError,
    NoThreshold,
    NormalizationSkipped,
    NumericError,
    UndefinedCorrelation,
    UndefinedProportion,
)

__version__ = "0.1.0"

MIHC_CHANNELS = ("DAPI", "CD3", "panCK")

__all__ = [
    "ConfigurationError",
    "DatasetValidationError",
    "InputValidationError",
    "MIHC_CHANNELS",
    "NoThreshold",
    "NormalizationSkipped",
    "NumericError",
    "UndefinedCorrelation",
    "UndefinedProportion",
]
