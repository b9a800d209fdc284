"""Exception types shared across the package.

Every failure mode raises a distinct class so callers can react to shape
problems, numeric-domain violations and protocol mistakes separately.
"""


class FedstyleError(Exception):
    """Base class for all package errors."""


class ShapeError(FedstyleError, ValueError):
    """Operand or parameter shapes are incompatible."""


class MathDomainError(FedstyleError, ValueError):
    """Elementwise input outside the mathematical domain (log/sqrt/pow)."""


class ContractError(FedstyleError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(FedstyleError, ArithmeticError):
    """A computation produced NaN or infinity."""


class ProtocolError(FedstyleError, RuntimeError):
    """Federated round bookkeeping was violated (rounds, missing heads)."""


class CheckpointError(FedstyleError, ValueError):
    """Base for checkpoint serialization failures."""


class BadMagicError(CheckpointError):
    """Buffer does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedPayloadError(CheckpointError):
    """Buffer ended before the declared payload was read."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter names or shapes do not match the target model."""


class IngestError(FedstyleError, OSError):
    """A dataset folder could not be read back consistently."""


class ConfigError(FedstyleError, ValueError):
    """Experiment configuration file or override could not be parsed."""


class ServiceError(FedstyleError, RuntimeError):
    """The experiment service rejected a request or could not be reached."""
