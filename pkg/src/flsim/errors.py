"""Exception hierarchy shared by every flsim module."""


class FlsimError(Exception):
    """Base class for all simulator errors."""

    exit_code = 3


class ConfigError(FlsimError):
    """Invalid configuration value. ``field`` is a dotted path when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ArchitectureError(ConfigError):
    """Layer stack cannot be built for the given input dims."""


class ShapeError(FlsimError):
    pass


class NumericError(FlsimError):
    exit_code = 4


class PrecisionError(FlsimError):
    """Operation requires 64-bit elements."""


class ContractError(FlsimError):
    """Caller broke an API contract (e.g. a stale forward cache)."""


class IncompatibleParamsError(FlsimError):
    pass


class ProtocolError(FlsimError):
    pass


class SplitError(FlsimError):
    pass


class RoundError(FlsimError):
    exit_code = 4


class CorruptFileError(FlsimError):
    exit_code = 2

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class MissingStateError(FlsimError):
    exit_code = 2


class ClientSkip(Exception):
    """Raised by a client update that cannot run; the round continues without it."""

    def __init__(self, client_id, reason):
        self.client_id = client_id
        self.reason = reason
        super().__init__(f"client {client_id} skipped: {reason}")
