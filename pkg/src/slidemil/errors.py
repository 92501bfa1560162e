"""Exception hierarchy shared across the pipeline.

CLI exit-code mapping: ConfigurationError and DomainError (and subclasses)
exit 1, OSError exits 2.
"""


class SlidemilError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(SlidemilError):
    """Invalid configuration value or malformed config file."""


class DomainError(SlidemilError):
    """Input violates an operation precondition."""


class EmptyBagError(DomainError):
    """A slide produced no accepted tiles."""


class StatisticalError(SlidemilError):
    """A resampling procedure could not produce a valid estimate."""


class TrainingError(SlidemilError):
    """Training diverged or could not proceed."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
