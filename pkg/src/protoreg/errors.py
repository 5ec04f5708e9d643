"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: ValidationError -> 2,
everything else unexpected -> 3.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition or type invariant."""


class FormatError(ValidationError):
    """A serialized volume/field file is malformed or inconsistent."""
