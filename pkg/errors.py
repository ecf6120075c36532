"""Exception hierarchy shared by the pipeline stages and the command line."""


class IxwatchError(Exception):
    """Base class for all ixwatch errors."""

    exit_status = 2


class ConfigError(IxwatchError):
    """Invalid or missing configuration, detected before any input is read."""

    exit_status = 1


class InputError(IxwatchError):
    """An input file could not be read or does not cover what was asked for."""

    exit_status = 2


class NetflowParseError(IxwatchError):
    """A NetFlow datagram could not be decoded. Recoverable: the datagram is dropped."""


class ReplayLineError(IxwatchError):
    """A replay line was rejected."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
        self.reason = message


class ContractViolation(IxwatchError):
    """A caller broke an ordering contract (e.g. intervals fed out of order)."""
