"""Shared exception types."""


class MulticapError(Exception):
    pass


class DimensionError(MulticapError):
    """Shapes of the operands do not fit the operation."""


class ContractError(MulticapError):
    """A runtime precondition was violated (bad targets, truncated log, ...)."""


class ConfigError(MulticapError):
    """Invalid or inconsistent configuration."""


class TrainingDiverged(MulticapError):
    """Non-finite loss encountered; carries the step and per-loss values."""

    def __init__(self, step, losses):
        self.step = step
        self.losses = dict(losses)
        detail = ", ".join(f"{k}={v}" for k, v in self.losses.items())
        super().__init__(f"non-finite loss at update {step}: {detail}")
