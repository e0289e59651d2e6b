"""Exception hierarchy.

Every error carries the module that raised it, the offending field and a
short remediation hint so the command line driver can report them uniformly.
"""


class RobustStopperError(Exception):
    """Base class for all package errors."""

    module = "robust_stopper"

    def __init__(self, message, *, field=None, hint=None, module=None):
        super().__init__(message)
        self.field = field
        self.hint = hint
        if module is not None:
            self.module = module

    def describe(self):
        parts = [f"[{self.module}] {self}"]
        if self.field:
            parts.append(f"field: {self.field}")
        if self.hint:
            parts.append(f"hint: {self.hint}")
        return "; ".join(parts)


class ParameterError(RobustStopperError, ValueError):
    """A numeric argument violates an operation's precondition."""


class BoundViolationError(ParameterError):
    """A payoff exceeds its declared sup-norm bound."""


class AssumptionViolationError(RobustStopperError):
    """A penalty function fails one of the structural assumptions."""

    def __init__(self, message, *, assumption, **kwargs):
        super().__init__(message, **kwargs)
        self.assumption = assumption


class UnsupportedRuleError(RobustStopperError):
    """A stopping rule cannot be represented on the recombining lattice."""


class ObstacleViolationError(RobustStopperError):
    """Terminal condition of a reflected equation lies below the obstacle."""


class ShapeError(RobustStopperError, ValueError):
    """Two objects live on incompatible lattices."""


class LatticeTooCoarseError(RobustStopperError):
    """Too many optimal tilts had to be clipped into the admissible range."""


class BudgetError(RobustStopperError):
    """Exhaustive enumeration would exceed the configured budget."""

    def __init__(self, message, *, counts=None, **kwargs):
        super().__init__(message, **kwargs)
        self.counts = dict(counts or {})
