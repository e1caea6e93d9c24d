"""Exception taxonomy shared by the pipeline and the CLI exit codes."""


class UsageError(Exception):
    """Bad flags or arguments (CLI exit code 1)."""


class DataError(Exception):
    """Missing or malformed inputs (CLI exit code 2)."""


class NumericalError(Exception):
    """NaN or divergence during optimization (CLI exit code 3)."""
