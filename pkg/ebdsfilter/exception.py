class EbdsException(Exception):
    exit_code = 1
    errorcode = "internal-error"

    def __init__(self, message, payload=None):
        super().__init__()
        self.payload = dict(payload or ())
        self.message = message

    def to_dict(self):
        return {
            "code": self.errorcode,
            "message": self.message,
            "details": self.payload,
        }

    def __str__(self):
        return self.message

    def __reduce__(self):
        # errors raised in sweep workers are pickled back to the parent
        return (self.__class__, (self.message, self.payload))


class ConfigError(EbdsException):
    exit_code = 2
    errorcode = "invalid-config"


class InvalidParams(EbdsException):
    exit_code = 2
    errorcode = "invalid-parameters"


class Unsupported(EbdsException):
    exit_code = 2
    errorcode = "unsupported"


class NumericalError(EbdsException):
    exit_code = 3
    errorcode = "numerical-failure"


class CoefficientError(NumericalError):
    errorcode = "coefficient-evaluation"


class SimulationDiverged(NumericalError):
    errorcode = "simulation-diverged"


class DegenerateDensity(NumericalError):
    errorcode = "degenerate-density"


class DegenerateLikelihood(NumericalError):
    errorcode = "degenerate-likelihood"


class TrainingDiverged(NumericalError):
    errorcode = "training-diverged"


class UntrainedIndex(NumericalError):
    errorcode = "untrained-index"


class StorageError(EbdsException):
    exit_code = 4
    errorcode = "io-error"


class PersistenceError(StorageError):
    errorcode = "persistence-error"
