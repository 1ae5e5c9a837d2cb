"""Exception types shared across the package."""


class HorolabError(Exception):
    """Base class for all horolab errors."""


class ModelParameterError(HorolabError, ValueError):
    """Invalid model tag or parameters; the message names the violated constraint."""


class ChartDomainError(HorolabError):
    """A point left the validity domain of the coordinate chart."""


class IntegrationError(HorolabError):
    """The ODE solver failed.

    Attributes
    ----------
    time : float or None
        Parameter value at which the integration broke down.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ConvergenceError(HorolabError):
    """An iterative procedure did not converge.

    Carries the last iterate and the residual at the point of failure so
    callers can report partial results.
    """

    def __init__(self, message, last=None, residual=None):
        super().__init__(message)
        self.last = last
        self.residual = residual


class ConjugatePointError(HorolabError):
    """A boundary-value solve hit a (near-)singular fundamental solution."""


class ModelViolationError(HorolabError):
    """Observed data contradicts a structural assumption (e.g. monotonicity
    of the stable-tensor approximants on a space without conjugate points)."""


class RiccatiBlowupError(HorolabError):
    """Finite-time blow-up of a Riccati solution.

    Attributes
    ----------
    time : float
        Estimated blow-up time.
    """

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time
