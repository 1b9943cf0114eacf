class MucorError(Exception):
    """Base class for library errors."""


class GridMismatchError(MucorError, ValueError):
    pass


class FieldFormatError(MucorError, ValueError):
    pass


class SolverError(MucorError, RuntimeError):
    """A linear or nonlinear solve failed to reach its tolerance."""

    def __init__(self, message, iterations=None, residual=None, step=None, history=None):
        self.iterations = iterations
        self.residual = residual
        self.step = step
        self.history = list(history) if history is not None else []
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if iterations is not None:
            parts.append(f"iterations={iterations}")
        if residual is not None:
            parts.append(f"residual={residual:.3e}")
        super().__init__(", ".join(parts))


class HomogenizationError(MucorError, RuntimeError):
    def __init__(self, message, block=None):
        self.block = block
        if block is not None:
            message = f"block {block}: {message}"
        super().__init__(message)


class TrainingError(MucorError, RuntimeError):
    pass
