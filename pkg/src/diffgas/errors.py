"""Exception types shared across the package."""


class DiffGasError(Exception):
    """Base class; ``kind`` is the machine-readable tag used by the CLI."""

    kind = "error"


class NetworkParseError(DiffGasError):
    kind = "parse"


class ValidationError(DiffGasError, ValueError):
    kind = "validation"


class DisconnectedNetworkError(ValidationError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        parts = "; ".join(", ".join(c) for c in self.components)
        super().__init__(f"network is disconnected, components: {parts}")


class DomainError(DiffGasError, ValueError):
    kind = "domain"


class StateValidityError(DiffGasError, FloatingPointError):
    """Raised when a density unknown is non-positive or not finite."""

    kind = "state"

    def __init__(self, slot, description, value, time=None):
        self.slot = int(slot)
        self.description = description
        self.value = float(value)
        self.time = time
        msg = f"invalid state at slot {slot} ({description}): value {value!r}"
        if time is not None:
            msg += f" at t = {time:.6g} s"
        super().__init__(msg)
