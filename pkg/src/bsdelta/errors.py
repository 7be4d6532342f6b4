"""Exception hierarchy.

Numeric/contract failures derive from :class:`BsdeltaError` (CLI exit code 1);
configuration problems derive from :class:`ConfigError` (CLI exit code 2).
"""


class BsdeltaError(Exception):
    """Base class for numeric and contract errors."""


class SizeError(BsdeltaError):
    """A lattice request exceeds the enumeration cap."""


class StructuralError(BsdeltaError):
    """A field does not match the lattice layout (missing child values etc.)."""


class ExpressionError(BsdeltaError):
    """Syntax error in an expression, with position information."""


class EvaluationError(BsdeltaError):
    """Expression evaluation hit division by zero or a domain violation."""


class DriverValidationError(BsdeltaError):
    """Sampled driver values violate a declared growth/Lipschitz constant."""


class ContractError(BsdeltaError):
    """An operation was called outside its declared contract."""


class StepSizeError(BsdeltaError):
    """The quadratic-variation step is too large for a solvable implicit step.

    Raised when L_y * max_i dqv(i) >= 1, i.e. the backward map
    y -> y - f(t, y, z) * dqv is not guaranteed strictly increasing; the
    one-step equation may then have no solution.
    """


class NonSolvableError(BsdeltaError):
    """The one-step implicit equation has no root in any searched bracket."""


class AprioriBoundError(BsdeltaError):
    """A solved value escaped the deterministic envelope (C+1)e^{K(T-t)}."""


class AdmissibilityError(BsdeltaError):
    """A control charges a branch with mu . dw <= -1 (tilted weight <= 0)."""


class SubgradientError(BsdeltaError):
    """A numeric subgradient failed the conjugacy (Fenchel) residual check."""


class CertificateError(BsdeltaError):
    """A dual certificate check failed, with a witness node."""


class ConfigError(Exception):
    """Invalid experiment configuration (schema or value errors)."""
