"""Exception and warning types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition or shape contract."""


class ConfigurationError(ContractError):
    """A configuration value is unknown or internally inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced, or would produce, non-finite or out-of-domain values."""


class ManifestError(ContractError):
    """A dataset manifest failed validation."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class ConfigWarning(UserWarning):
    """A configuration deviates from the documented default recipe."""


class DataWarning(UserWarning):
    """Input data required a fallback (short clip, trailing phase, excluded entry)."""
