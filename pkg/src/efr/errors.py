"""Exception types shared across the toolkit.

All of these derive from builtins (ValueError / RuntimeError) so callers that
don't care about the distinction can catch the usual suspects.
"""


class ConfigurationError(ValueError):
    """An unsupported or inconsistent configuration was requested."""


class FeasibilityError(ValueError):
    """A solution violates a problem constraint.

    The message names the first violated constraint.
    """


class ParseError(ValueError):
    """A library file could not be parsed. Messages carry a line number."""


class DataError(ValueError):
    """Required reference data is missing or inconsistent."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or has an unknown version."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. non-finite loss); message carries diagnostics."""
