"""
Every error raised by `nlc_lab`. The CLI maps these onto exit codes, see `exit_code`.
"""

EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class NlcError(Exception):
    """
    Base of the hierarchy. `kind` is the short name printed by the CLI.
    """

    kind = "Runtime"
    exit_code = EXIT_RUNTIME


class ConfigInvalid(NlcError):
    """A configuration value or input path failed validation."""

    kind = "ConfigInvalid"
    exit_code = EXIT_CONFIG


class IoFailure(NlcError):
    """Reading or writing an artifact failed."""

    kind = "Io"
    exit_code = EXIT_IO


class VersionMismatch(IoFailure):
    """A binary artifact was written with a different format version."""

    kind = "VersionMismatch"


class CorruptPayload(IoFailure):
    """Checksum or length check of a binary artifact failed."""

    kind = "CorruptPayload"


class DimMismatch(NlcError):
    """Vector / matrix / network shapes do not agree."""

    kind = "DimMismatch"


class RankDeficient(NlcError):
    """A matrix handed to `pseudo_inverse` is not of full rank."""

    kind = "RankDeficient"


class NonFiniteGradient(NlcError):
    """A gradient or loss went NaN or Inf during training."""

    kind = "NonFinite"


class ZeroDirection(NlcError):
    """The denoiser output is too small to normalize."""

    kind = "ZeroDirection"


class ScheduleExhausted(NlcError):
    """A sampler was handed a schedule with no steps left to take."""

    kind = "ScheduleExhausted"


class EmptyRecords(NlcError):
    """A lookup table was requested from zero records."""

    kind = "EmptyRecords"


class InvalidRange(NlcError):
    """A numeric parameter is outside of its valid range."""

    kind = "InvalidRange"


class ShapeMismatch(NlcError):
    """Reports being compared do not line up."""

    kind = "ShapeMismatch"


def exit_code(error: BaseException) -> int:
    """
    Exit status for the given error. Anything that isn't an `NlcError` is a runtime failure.
    :param error: The error that stopped a command.
    :return: The process exit status.
    """
    if isinstance(error, NlcError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    return EXIT_RUNTIME


def one_line(error: BaseException) -> str:
    """
    Render an error as the single machine-parsable line the CLI writes to stderr.
    :param error: Error to render.
    :return: `error kind=<Kind> message=<text>` with newlines flattened.
    """
    if isinstance(error, NlcError):
        kind = error.kind
    elif isinstance(error, OSError):
        kind = "Io"
    else:
        kind = "Runtime"
    message = " ".join(str(error).split())
    return f"error kind={kind} message={message}"
