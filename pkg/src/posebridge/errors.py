"""Exception hierarchy shared across the package."""


class PoseBridgeError(ValueError):
    """Base class for contract and validation failures."""


class NonFiniteError(PoseBridgeError):
    """A primitive produced NaN or Inf."""


class ShapeError(PoseBridgeError):
    """Operands have incompatible shapes."""


class DegenerateError(PoseBridgeError):
    """An input is degenerate for the requested operation (e.g. zero norm)."""


class ConfigError(PoseBridgeError):
    """Invalid or unknown configuration key."""


class ContractViolation(PoseBridgeError):
    """The zero-shot contract was broken (e.g. unseen data used in training)."""


class CheckpointError(OSError):
    """Malformed checkpoint container."""
