"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class ShapeError(ValidationError):
    """Array shape is incompatible with the operation."""


class TransferError(ValidationError):
    """A checkpoint tensor cannot be copied into the target model."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
