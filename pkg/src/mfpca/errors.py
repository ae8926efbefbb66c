"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (flags, hyperparameters, basis sizes)."""


class ParseError(ValueError):
    """Malformed input file content."""


class ValidationError(ValueError):
    """Input data violates a dataset invariant."""


class NumericalError(RuntimeError):
    """Numerical failure: improper variational density, failed factorization, ELBO decrease."""
