class IclaError(Exception):
    """Base class for toolkit errors."""


class DataError(IclaError, ValueError):
    pass


class ParameterError(IclaError, ValueError):
    pass


class ShapeError(IclaError, ValueError):
    pass


class NumericError(IclaError, ArithmeticError):
    pass


class UnsupportedKindError(IclaError, ValueError):
    pass


class TrainingDiverged(IclaError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
