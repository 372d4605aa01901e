"""Exception hierarchy shared by all qfhas modules."""


class QfhasError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"


class DomainError(QfhasError, ValueError):
    kind = "domain_error"


class CurveError(QfhasError, ValueError):
    kind = "construction_error"


class FitError(QfhasError, ValueError):
    kind = "fit_error"


class SolverError(QfhasError, RuntimeError):
    kind = "solver_error"


class DivergenceError(SolverError):
    kind = "divergence_error"


class GatingError(QfhasError, RuntimeError):
    """A chunk was requested while the buffer is full or a download is active."""

    kind = "gating_violation"


class MetricError(QfhasError, ValueError):
    kind = "undefined_metric"


class ScenarioError(QfhasError, ValueError):
    """Scenario validation failure; ``path`` names the offending field."""

    kind = "validation_error"

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
