"""Exception types shared by the package."""


class FdbsdeError(Exception):
    pass


class ScenarioError(FdbsdeError):
    """Problem with a scenario file or object."""


class ParseError(ScenarioError):
    pass


class SchemaError(ScenarioError):
    pass


class SemanticError(ScenarioError):
    pass


class DomainError(FdbsdeError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalError(FdbsdeError):
    """Iteration failed to converge.

    `history` holds the residual trace, `best` the best iterate seen (if any).
    """

    def __init__(self, message, history=None, best=None, achieved=None):
        super().__init__(message)
        self.history = [] if history is None else list(history)
        self.best = best
        self.achieved = achieved


class AssumptionError(FdbsdeError):
    """A standing assumption required by an operation does not hold."""
