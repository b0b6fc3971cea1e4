"""Exception types raised across the package."""


class FaceAdaptError(Exception):
    pass


class InvalidInputError(FaceAdaptError, ValueError):
    pass


class InvalidConfigError(FaceAdaptError, ValueError):
    pass


class NumericError(FaceAdaptError, FloatingPointError):
    """Non-finite value encountered; carries where it happened when known."""

    def __init__(self, message, block_index=None, step=None):
        super().__init__(message)
        self.block_index = block_index
        self.step = step


class CheckpointError(FaceAdaptError):
    pass
