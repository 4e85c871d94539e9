"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent model, training or pipeline configuration."""


class InputValidationError(ValueError):
    """Tensor or image input violates a shape/range precondition."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in a forward pass or loss."""


class DatasetValidationError(ValueError):
    """Dataset layout, pairing or split manifest is invalid."""


class NormalizationSkipped(Exception):
    """Raised by stain normalization when a patch has too little tissue."""

    def __init__(self, tissue_fraction: float, required: float):
        super().__init__(
            f"tissue fraction {tissue_fraction:.4f} below required {required:.4f}"
        )
        self.tissue_fraction = tissue_fraction
        self.required = required


class UndefinedCorrelation(ArithmeticError):
    """Pearson correlation requested on a zero-variance input."""


class NoThreshold(ArithmeticError):
    """Otsu threshold requested on a population with a single distinct value."""


class UndefinedProportion(ArithmeticError):
    """Positive-cell proportion requested for an image with no cells."""
