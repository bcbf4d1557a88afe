"""Exception hierarchy shared by all modules."""


class NoetherError(Exception):
    """Base class for every error raised by the library."""


class DomainError(NoetherError, ValueError):
    """A jet point or parameter lies outside the domain of an operation."""


class NumericDomainError(DomainError):
    """A computation produced a non-finite value."""


class SingularControlError(DomainError):
    """The optimal control formula divides by a vanishing second derivative."""


class CapabilityError(NoetherError):
    """A field lacks a partial derivative that the caller needs."""


class StencilError(NoetherError):
    """Evaluation failed at a finite-difference stencil point."""


class RangeError(NoetherError, ValueError):
    """A time lies outside a tabulated grid."""


class AnsatzMismatchError(NoetherError):
    """A residual could not be represented in the chosen basis."""


class ConstructionError(NoetherError):
    """A symmetry family failed certification.

    The failing :class:`~stochnoether.symmetry.DeterminingReport` is kept on
    ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ReductionError(NoetherError):
    """The value-function ansatz broke down (e.g. a coefficient hit zero)."""


class BlowUpError(NoetherError):
    """An ODE integration produced a non-finite state."""

    def __init__(self, message, last_good_index=None):
        super().__init__(message)
        self.last_good_index = last_good_index


class SimulationError(NoetherError):
    """Policy evaluation failed during a path simulation."""


class ConfigurationError(NoetherError, ValueError):
    """A solver configuration is unusable."""


class DegenerateLagrangianError(NoetherError):
    """The Hessian of a Lagrangian in the control is singular."""


class ProvenanceError(NoetherError):
    """Objects combined in one computation come from different sources."""


class BasisError(NoetherError):
    """A regression design is rank deficient or empty."""


class ParseError(NoetherError, ValueError):
    """A configuration file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
