"""Exception types raised by the dsmrf library.

Library code raises these and never prints; the CLI maps them onto row
statuses and exit codes.
"""


class DsmrfError(Exception):
    """Base class for every error raised by dsmrf."""


class InvalidArgumentError(DsmrfError, ValueError):
    pass


class SingularCovarianceError(DsmrfError, ValueError):
    """Raised when h_t = 0 makes a covariance (or a 1/sqrt(h) factor) singular."""


class StateError(DsmrfError, RuntimeError):
    pass


class ConfigError(DsmrfError, ValueError):
    pass


class NumericError(DsmrfError, ArithmeticError):
    """A linear solve failed. `condition` holds the estimated condition number when known."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SolverFailure(DsmrfError, RuntimeError):
    """Newton/homotopy did not reach the physical root.

    `diagnostics` is a plain dict (last lambda reached, residual, iterations)
    so it can be logged or written into a CSV message as-is.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ', '.join(f'{k}={v:.3g}' if isinstance(v, float) else f'{k}={v}'
                            for k, v in sorted(self.diagnostics.items()))
        return f'{base} ({details})'
