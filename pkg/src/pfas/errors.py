class ConfigError(ValueError):
    """Invalid scenario or command-line configuration."""


class NumericalError(ArithmeticError):
    """A solver hit a singular or diverging system it could not recover from."""


class RankDeficientError(NumericalError):
    def __init__(self, message, condition=float("inf")):
        super().__init__(f"{message} (condition number {condition:.3g})")
        self.condition = condition
