"""Exception hierarchy shared by the library and the CLI."""


class GkcvError(Exception):
    """Base class for all library errors."""


class ConfigError(GkcvError, ValueError):
    """Invalid parameters or experiment configuration."""


class NumericalError(GkcvError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class ReplicaFailure(NumericalError):
    def __init__(self, replica, observable):
        self.replica = int(replica)
        self.observable = observable
        super().__init__(f"non-finite value in observable {observable!r} of replica {self.replica}")


class QuadratureError(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class MissingSeriesError(GkcvError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing series"


class NoAdjointError(GkcvError, NotImplementedError):
    pass
