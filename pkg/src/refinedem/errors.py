"""Exception hierarchy shared by all modules."""


class RefineDEMError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameter(RefineDEMError, ValueError):
    pass


class SolverDiverged(RefineDEMError, RuntimeError):
    """A non-finite multiplier or velocity appeared during a solve."""

    def __init__(self, message, row_index=-1):
        super().__init__(message)
        self.row_index = row_index


class BuildTimeout(RefineDEMError, RuntimeError):
    """A bed did not settle within its step budget."""

    def __init__(self, message, residual_ke=float("nan")):
        super().__init__(message)
        self.residual_ke = residual_ke


class ExperimentFault(RefineDEMError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SingularFit(RefineDEMError, ValueError):
    pass


class InvalidInput(RefineDEMError, ValueError):
    pass


class InvalidComparison(RefineDEMError, ValueError):
    pass


class ConfigError(RefineDEMError, ValueError):
    """Schema violation; ``pointer`` is a JSON pointer into the document."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
