"""Exception types shared across the package."""


class SoraError(Exception):
    pass


class ShapeError(SoraError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(message)


class NonFiniteError(SoraError, FloatingPointError):
    """A NaN or infinity appeared where only finite values are allowed.

    ``where`` names the offending coordinate, step or parameter block.
    """

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(message)


class ConvergenceError(SoraError, RuntimeError):
    def __init__(self, message, iterations):
        self.iterations = iterations
        super().__init__(message)


class ValidationError(SoraError, ValueError):
    """Invalid configuration, spec file or argument value."""


class TrainingError(SoraError, RuntimeError):
    def __init__(self, message, step=None, block=None):
        self.step = step
        self.block = block
        super().__init__(message)


class CheckpointError(SoraError, ValueError):
    pass
