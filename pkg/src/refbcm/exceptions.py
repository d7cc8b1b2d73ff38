"""Exception and warning types raised across the package."""


class RefBCMError(Exception):
    """Base class for package errors."""


class TrialParseError(RefBCMError, ValueError):
    """A trial CSV could not be parsed; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrialValidationError(RefBCMError, ValueError):
    """A patient record or dataset violates a structural invariant."""

    def __init__(self, message, patient_id=None):
        self.patient_id = patient_id
        if patient_id is not None:
            message = f"patient {patient_id!r}: {message}"
        super().__init__(message)


class NonEstimableError(RefBCMError):
    """Imputation parameters cannot be estimated from the available rows."""

    def __init__(self, message, visit=None):
        self.visit = visit
        super().__init__(message)


class NumericalError(RefBCMError, ArithmeticError):
    """Non-finite or singular quantity encountered during computation."""

    def __init__(self, message, patient_id=None):
        self.patient_id = patient_id
        if patient_id is not None:
            message = f"{message} (patient {patient_id!r})"
        super().__init__(message)


class OptimizationError(NumericalError):
    """Every optimizer start failed."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or []
        super().__init__(message)


class ConfigError(RefBCMError, ValueError):
    """Invalid configuration file or option; ``line`` points into the file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = str(path)
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class ConvergenceWarning(UserWarning):
    """MCMC diagnostics outside their target range."""
