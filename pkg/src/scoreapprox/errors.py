"""Exception hierarchy.

Every error carries a ``category`` used by the command line to pick an
exit code: config, numeric, convergence or io.
"""


class ScoreApproxError(Exception):
    category = "numeric"


class ParameterDomainError(ScoreApproxError, ValueError):
    category = "config"


class GeometryError(ScoreApproxError, ValueError):
    category = "config"


class ShapeError(ScoreApproxError, ValueError):
    category = "config"


class DesignError(ScoreApproxError, ValueError):
    category = "config"


class NumericError(ScoreApproxError, ArithmeticError):
    category = "numeric"


class SimulationError(NumericError):
    pass


class ConvergenceError(ScoreApproxError, RuntimeError):
    category = "convergence"

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FitError(ConvergenceError):
    pass
