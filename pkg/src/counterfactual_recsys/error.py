from typing import Any, Optional


class CounterfactualRecsysError(Exception):
    """An error raised by counterfactual_recsys.

    All errors raised by the package inherit this class so that they can easily be caught and handled.
    for example:

        try:
            f, g, head, state = acl_train(f, g, head, split, config)
        except DivergenceError as e:  # perhaps the learning rate is too high?
            f, g = e.last_good["f"], e.last_good["g"]

    The command line interface maps each subclass to a process exit code through `exit_code`.
    """

    exit_code = 1


class ConfigurationError(CounterfactualRecsysError):
    """An invalid setting, argument shape or combination of options"""


class RunLockedError(ConfigurationError):
    """The run directory is owned by another process"""


class ReportError(ConfigurationError):
    """Runs that cannot be aggregated into one comparison table"""


class DataError(CounterfactualRecsysError):
    """A problem with the interaction data or the artifacts derived from it"""

    exit_code = 2


class DataParseError(DataError):
    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        super().__init__(message if line_number is None else f"line {line_number}: {message}")
        self.line_number = line_number


class SplitError(DataError):
    def __init__(self, message: str, user: Optional[str] = None) -> None:
        super().__init__(message)
        self.user = user


class SamplingError(DataError):
    """Not enough candidate items to draw the requested negatives"""


class EvaluationError(DataError):
    """Missing inputs for a weighted evaluation (e.g. oracle entries for test pairs)"""


class DivergenceError(CounterfactualRecsysError):
    """Training produced a non-finite or exploding objective.

    `last_good` maps a role ("f", "g", "head") to the last parameters that produced a finite objective.
    """

    exit_code = 3

    def __init__(self, message: str, last_good: Optional[dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.last_good = {} if last_good is None else last_good


class GradientOracleError(CounterfactualRecsysError):
    def __init__(self, message: str, coordinate: int) -> None:
        super().__init__(f"{message} (coordinate {coordinate})")
        self.coordinate = coordinate


class UnknownIdError(DataError, LookupError):
    """A user or item id outside the model's dense id range"""
