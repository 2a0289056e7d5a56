"""Exception hierarchy shared by all modules."""


class LQRError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LQRError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class HorizonError(LQRError, ValueError):
    pass


class SolverError(LQRError, ArithmeticError):
    def __init__(self, message, stage=None):
        self.stage = stage
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)


class DivergenceError(SolverError):
    pass


class DomainError(LQRError, ValueError):
    pass


class BranchError(LQRError, ValueError):
    pass


class PredictionWindowError(LQRError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SizeCapError(LQRError, ValueError):
    pass


class InstanceMismatchError(LQRError, ValueError):
    pass


class ConfigError(LQRError, ValueError):
    pass
