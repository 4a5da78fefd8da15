"""Exception types shared across the package.

The CLI maps these onto its exit-code taxonomy, so keep the hierarchy flat.
"""


class ContractViolation(ValueError):
    """A precondition of an operation was not met."""


class NumericFailure(FloatingPointError):
    """NaN or divergence detected during a numerical computation."""

    def __init__(self, message: str, node: str | None = None, step: int | None = None):
        super().__init__(message)
        self.node = node
        self.step = step


class FormatError(ValueError):
    """A container file has the wrong magic, version or layout."""


class CompatibilityError(ValueError):
    """Two artifacts (model, key, codebook, extractor) do not belong together."""


class KeySelectionError(RuntimeError):
    """Not enough candidate patches survived the key-selection filters."""


class ConfigError(ValueError):
    """A configuration document violates the schema."""
