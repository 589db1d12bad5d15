"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CeeError(Exception):
    exit_code = 1
    kind = "error"

    def to_dict(self):
        return {"kind": self.kind, "type": type(self).__name__, "message": str(self)}


class ConfigError(CeeError, ValueError):
    exit_code = 2
    kind = "config"


class DataError(CeeError, ValueError):
    exit_code = 3
    kind = "data"


class SchemaError(DataError):
    """A required column role is not present in the input."""


class DataValueError(DataError):
    """A cell holds a value outside its allowed set."""


class ConsistencyError(DataError):
    """Outcome presence disagrees with the missingness flag."""


class StructureError(DataError):
    """Panel shape or availability/treatment structure is invalid."""


class NumericalError(CeeError, ArithmeticError):
    exit_code = 4
    kind = "numerical"


class SingularityError(NumericalError):
    pass


class EstimabilityError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])

    def to_dict(self):
        out = super().to_dict()
        out["trace"] = self.trace
        return out
