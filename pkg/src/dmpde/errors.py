"""Exception types shared by every stage of the pipeline."""


class ConfigError(ValueError):
    """Inputs violate a precondition (shapes, ranges, unknown ids)."""


class NumericalFailure(ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    ``info`` carries whatever partial state is useful for diagnosis
    (offending index, last residual, loss history, ...).
    """

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info
