"""Exception hierarchy. Exit codes: 1 validation/usage, 2 missing prerequisite, 3 numerical."""


class OrcaError(Exception):
    exit_code = 1


class ConfigurationError(OrcaError):
    """Invalid configuration value; message names the offending field."""

    exit_code = 1


class UsageError(OrcaError):
    """Operation called with arguments violating its contract."""

    exit_code = 1


class PromptTooLongError(UsageError):
    """Prompt assembly or scoring would exceed the model context window."""


class UndefinedSimilarityError(UsageError):
    """Cosine similarity requested against a zero-norm vector."""


class UndefinedFitError(UsageError):
    """Regression fit requested on degenerate data (fewer than 2 points)."""


class MissingPrerequisiteError(OrcaError):
    """A pipeline stage ran before the stages it depends on."""

    exit_code = 2


class NumericalError(OrcaError):
    """Non-finite value encountered in a numerical computation."""

    exit_code = 3


class TrainingError(NumericalError):
    """Training diverged or failed its improvement contract."""
