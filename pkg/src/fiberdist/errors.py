"""Exception hierarchy.  CLI exit codes hang off the class."""


class FiberDistError(Exception):
    exit_code = 4
    code = "E_INTERNAL"


class InputError(FiberDistError, ValueError):
    exit_code = 2
    code = "E_INPUT"


class DimensionError(InputError):
    code = "E_DIMENSION"


class GradientNormError(InputError):
    code = "E_GRADIENT_NORM"


class ChecksumError(InputError):
    code = "E_CHECKSUM"


class DesignError(InputError):
    """Gradient set cannot determine a full diffusion tensor."""

    code = "E_DESIGN"


class ConvergenceError(FiberDistError, RuntimeError):
    exit_code = 3
    code = "E_CONVERGENCE"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class StageError(FiberDistError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
        self.code = getattr(cause, "code", "E_INTERNAL")
