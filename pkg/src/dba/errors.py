"""Exception hierarchy shared across the package."""


class DbaError(Exception):
    pass


class DimensionError(DbaError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(DbaError, ValueError):
    """A scalar parameter is outside its valid range."""


class GraphError(DbaError):
    """Invalid autodiff recording (unknown op, bad shapes)."""


class ContractError(DbaError):
    """A call violates a documented usage contract."""


class CheckpointError(DbaError):
    pass


class TrainingError(DbaError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
