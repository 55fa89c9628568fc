class ConfigError(ValueError):
    """Invalid variant/degree/resolution or malformed parameter data."""


class ContractError(RuntimeError):
    """A caller violated a pass-to-pass contract (e.g. backward without saved forward state)."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
