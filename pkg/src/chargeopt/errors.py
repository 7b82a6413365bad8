"""Exception types shared across the package."""


class ChargeOptError(Exception):
    """Base class for all domain errors raised by this package."""


class ScenarioError(ChargeOptError):
    """Scenario file cannot be parsed or violates its invariants."""


class CaseFormatError(ChargeOptError):
    """Network case file is malformed."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class PowerFlowError(ChargeOptError):
    """Power flow did not converge or the Jacobian is singular."""


class EstimationError(ChargeOptError):
    """Demand or transition estimation received unusable input."""


class InfeasibleStageError(ChargeOptError):
    """No decision satisfies the stage constraints at the given state."""
