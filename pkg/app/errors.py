class RBMCError(Exception):
    """Base class for every error raised by the sampler package."""


class ParameterError(RBMCError, ValueError):
    pass


class SingularityError(RBMCError, ArithmeticError):
    pass


class NumericError(RBMCError, ArithmeticError):
    pass


class EmptyMeasureError(ParameterError):
    pass


class InfeasibleChargeError(ParameterError):
    pass


class UnsupportedConfigurationError(ParameterError):
    pass


class ConvergenceError(RBMCError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ConfigError(RBMCError):
    pass
