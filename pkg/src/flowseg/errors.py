"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingPrerequisiteError -> 3, DataIntegrityError -> 4.
"""


class FlowsegError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(FlowsegError):
    """Invalid, unknown, or inconsistent configuration."""


class MissingPrerequisiteError(FlowsegError):
    """A required checkpoint, run, or input artifact is absent."""


class DataIntegrityError(FlowsegError):
    """On-disk data violates the documented layout or internal invariants."""
