"""Exception hierarchy. Each class carries the CLI exit code of its failure class."""


class SEVulnError(Exception):
    exit_code = 1


class ParseError(SEVulnError):
    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(SEVulnError):
    exit_code = 2


class SingularBranchError(ValidationError):
    pass


class DomainError(SEVulnError, ValueError):
    exit_code = 2


class ShapeError(SEVulnError, ValueError):
    exit_code = 2


class LookupFailure(SEVulnError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class RegularityError(SEVulnError):
    """Constraint gradients are linearly dependent at the current point."""

    exit_code = 3

    def __init__(self, message, dependent=()):
        self.dependent = tuple(dependent)
        super().__init__(message)


class ObservabilityError(SEVulnError):
    exit_code = 3


class SingularKKTError(SEVulnError):
    exit_code = 3

    def __init__(self, message, rcond=None):
        self.rcond = rcond
        super().__init__(message)


class ConvergenceError(SEVulnError):
    exit_code = 4

    def __init__(self, message, history=()):
        self.history = list(history)
        super().__init__(message)


class SingularityError(ConvergenceError):
    """Power-flow Jacobian became singular."""


class StalePointError(SEVulnError):
    exit_code = 3


class DegenerateResidualError(SEVulnError):
    exit_code = 5


class ToleranceBreach(SEVulnError):
    exit_code = 6


class ZeroEnergyError(SEVulnError, ZeroDivisionError):
    """All singular values vanish, so cumulative energy is undefined."""

    exit_code = 5
