"""Exception hierarchy shared by the solver, the oracle and the CLI."""


class PvfimError(Exception):
    """Base class. ``context`` carries loop indices and other diagnostics."""

    def __init__(self, message, **context):
        self.message = message
        self.context = dict(context)
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)

    def with_context(self, **more):
        """Copy of the error with extra context prepended (e.g. the outer index l)."""
        err = type(self)(self.message, **{**more, **self.context})
        err.__cause__ = self
        return err


class InvalidArgumentError(PvfimError, ValueError):
    pass


class NumericalFailure(PvfimError, ArithmeticError):
    pass


class BarrierDomainError(NumericalFailure):
    """The log-barrier argument f_J + eps - f became nonpositive."""


class ContractViolation(PvfimError, ValueError):
    pass


class ScheduleInvalid(PvfimError, ValueError):
    pass


class OracleError(PvfimError, RuntimeError):
    pass
