"""Exception types shared across the package.

Everything raised on purpose derives from MobaError so callers can catch the
package's failures without also swallowing genuine bugs.
"""


class MobaError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeMismatchError(MobaError, ValueError):
    """Operands have incompatible shapes; the message reports both."""


class NonFiniteError(MobaError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DegenerateRowError(MobaError, ValueError):
    """A row ended up with no admissible entries: fully masked softmax input,
    or a zero normalizer when finalizing partial attention."""


class DegenerateBatchError(MobaError, ValueError):
    """No sequence or position in the batch qualifies for the requested
    statistic (e.g. every target masked out, or no sequence at max length)."""


class PartitionError(MobaError, ValueError):
    """A block partition is inconsistent with the data it is applied to."""


class ParameterError(MobaError, ValueError):
    """An argument is outside its documented domain."""


class RoutingError(MobaError, ValueError):
    """A routing table does not match the partition/tensors it is used with,
    or violates a routing invariant."""


class PipelineError(MobaError, RuntimeError):
    """Internal invariant violation inside the grouped attention pipeline."""


class ConfigError(MobaError, ValueError):
    """An attention / model / schedule configuration is invalid."""


class ContractError(MobaError, TypeError):
    """An autodiff entry point was called outside its contract."""


class OracleError(MobaError, ArithmeticError):
    """A numerical oracle (finite differences) failed to produce a value."""


class FitDomainError(MobaError, ValueError):
    """Curve fitting in log space needs strictly positive inputs."""


class TrainingDivergedError(MobaError, RuntimeError):
    """Training hit a non-finite loss. Carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
