class AuditError(Exception):
    """Base class for every failure raised by the toolkit.

    Each subclass carries the process exit code the CLI uses for it.
    """

    exit_code = 1


class ShapeError(AuditError, ValueError):
    exit_code = 10


class ContractError(AuditError, ValueError):
    exit_code = 11


class RangeError(AuditError, ValueError):
    exit_code = 12


class KindError(AuditError, TypeError):
    exit_code = 13


class SingularityError(AuditError, ArithmeticError):
    exit_code = 14


class DivergenceError(AuditError, ArithmeticError):
    exit_code = 15

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(AuditError, RuntimeError):
    exit_code = 16


class ConfigError(AuditError, ValueError):
    exit_code = 2


class ArtifactNotFoundError(AuditError, FileNotFoundError):
    exit_code = 3


class SchemaError(AuditError, ValueError):
    exit_code = 4


class VersionError(AuditError, ValueError):
    exit_code = 5

    def __init__(self, kind: str, found, supported):
        super().__init__(
            f"{kind} has format version {found!r}, this build reads version {supported!r}"
        )
        self.found = found
        self.supported = supported


class FingerprintMismatchError(AuditError, ValueError):
    exit_code = 6
