"""Exception hierarchy shared by all solver and pipeline modules."""


class PhaselessHelmError(Exception):
    """Base class for all workbench errors."""


class DomainError(PhaselessHelmError):
    """Argument outside the supported range of a special function."""


class SingularityError(PhaselessHelmError):
    """Evaluation requested at a singular point (e.g. x = y for the kernel)."""


class GeometryError(PhaselessHelmError):
    """Invalid geometric configuration (point inside obstacle, bad scene)."""


class ParseError(PhaselessHelmError):
    """Malformed scene or dataset file.

    Attributes
    ----------
    line : int or None
        1-based line number of the offending record, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContinuationError(PhaselessHelmError):
    """Phase continuation failed (mask island or undersampled direction grid)."""


class AnchoringError(PhaselessHelmError):
    """Alternating-projection phase anchoring did not converge.

    Attributes
    ----------
    history : list of float
        Per-iteration phase increments, for diagnosis.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ConvergenceError(PhaselessHelmError):
    """Iterative linear solve failed to reach the requested residual.

    Attributes
    ----------
    residual : float
        Final relative residual.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class AmbiguousBranchError(PhaselessHelmError):
    """Branch disambiguation residual ratio below the decision threshold."""

    def __init__(self, message, residual_plus=None, residual_minus=None):
        super().__init__(message)
        self.residual_plus = residual_plus
        self.residual_minus = residual_minus
