"""Exception hierarchy shared across the package, with CLI exit-code mapping."""


class MilError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MilError):
    """Invalid configuration value (bad priors, non-positive temperature, ...)."""


class UsageError(MilError):
    """Caller misuse: bad command-line arguments, unknown split name, empty train set."""


class DimensionError(MilError):
    """Tensor shapes incompatible with the requested operation."""


class DomainError(MilError):
    """Input outside the mathematical domain of an operation (e.g. log of x <= 0)."""


class ContractError(MilError):
    """An API precondition was violated (non-scalar loss, empty bag, mixed tapes)."""


class FormatError(MilError):
    """On-disk artifact is malformed: manifest, feature file, checkpoint, CSV."""


class DataError(MilError):
    """Dataset content violates what the model requires (e.g. missing relevance)."""


class MetricError(MilError):
    """A metric is undefined on the given predictions (absent class, single class)."""


class NumericError(MilError):
    """Numerical failure during training, e.g. a NaN loss."""


class BagSkipError(MilError):
    """A bag has no instances in any enabled modality and must be skipped."""


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit-code convention."""
    if isinstance(exc, (FormatError, DataError)):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, MilError):
        return EXIT_USAGE
    raise exc
