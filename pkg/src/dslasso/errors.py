"""Exception hierarchy mapped onto CLI exit codes."""


class DslassoError(Exception):
    """Base class; ``exit_code`` drives the CLI exit status."""

    exit_code = 1


class UsageError(DslassoError):
    """Invalid flags or invalid option combinations."""

    exit_code = 1


class DataError(DslassoError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ConvergenceError(DslassoError):
    """A solve exhausted its iteration budget."""

    exit_code = 3


class VerificationError(DslassoError):
    """One or more certification checks failed."""

    exit_code = 4
