class InvalidParameterError(ValueError):
    """Raised when an argument violates a documented precondition."""


class OutOfDomainError(ValueError):
    """Raised when a spline is evaluated outside its valid time span."""


class PlanningError(RuntimeError):
    pass


class NoPathFound(PlanningError):
    """The open set was exhausted without reaching the target."""


class BudgetExceeded(PlanningError):
    """The node expansion budget ran out before the target was reached."""


class ConfigError(ValueError):
    pass
