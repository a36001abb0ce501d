"""Exception hierarchy. Each class carries a short category used by the CLI."""


class ImgNavError(Exception):
    category = "error"


class InvalidInputError(ImgNavError, ValueError):
    category = "invalid-input"


class UnsatisfiableTierError(ImgNavError):
    category = "unsatisfiable-tier"


class NoPathError(ImgNavError):
    category = "no-path"


class InternalInconsistencyError(ImgNavError):
    category = "internal-inconsistency"


class NumericalFailureError(ImgNavError, ArithmeticError):
    category = "numerical-failure"


class DatasetDegeneracyError(ImgNavError):
    category = "dataset-degeneracy"


class ConfigurationError(ImgNavError):
    category = "configuration"
