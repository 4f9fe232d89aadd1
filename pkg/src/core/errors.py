"""Exception types and their command-line exit codes."""


class TalError(Exception):
    """Base class for errors raised by the re-id pipeline."""

    exit_code = 3


class ConfigError(TalError):
    """Invalid command-line usage or experiment configuration."""

    exit_code = 1


class OutputExistsError(ConfigError):
    """Refusing to overwrite a non-empty output location."""


class DataError(TalError):
    """Dataset cannot be parsed or does not satisfy evaluation preconditions."""

    exit_code = 2


def exit_code_for(error: BaseException) -> int:
    """Map an exception escaping a command to the process exit code."""
    if isinstance(error, TalError):
        return error.exit_code
    return 3
