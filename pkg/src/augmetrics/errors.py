class ValidationError(ValueError):
    """Bad argument, config field, or spec value."""


class FormatError(ValueError):
    pass


class CorruptRecordError(ValueError):
    pass


class NotDiscreteError(ValueError):
    """Raised when an exact outcome enumeration is requested for a continuous transform."""


class NumericalError(ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class MissingCheckpointError(KeyError):
    pass
