"""Error types shared across the toolkit."""


class DataError(ValueError):
    """Raised when input data violates a contract (bad file, degenerate
    values, missing references, leakage guards).

    The CLI maps this to exit code 2; plain usage errors exit with 1.
    """
