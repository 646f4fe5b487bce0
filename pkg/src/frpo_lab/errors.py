"""Exception types shared across the lab."""


class FrpoLabError(Exception):
    """Base class for all lab errors."""


class EnumerationTooLarge(FrpoLabError):
    pass


class DegenerateGroup(FrpoLabError):
    pass


class ShapeMismatch(FrpoLabError):
    pass


class NonFiniteInput(FrpoLabError):
    pass


class NonDeterministicObjective(FrpoLabError):
    pass


class NumericalFailure(FrpoLabError):
    """Failures that map to CLI exit status 2."""


class DivergenceDetected(NumericalFailure):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class BisectionNotConverged(NumericalFailure):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class InsufficientSignal(FrpoLabError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(FrpoLabError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
