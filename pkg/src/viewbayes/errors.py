"""Exception and warning types shared across the package."""


class ViewBayesError(Exception):
    """Base class for all errors raised by viewbayes."""


class EmptyInput(ViewBayesError, ValueError):
    pass


class LengthMismatch(ViewBayesError, ValueError):
    pass


class DegenerateInput(ViewBayesError):
    """Points do not affinely span the requested dimension."""


class InconsistentDistances(ViewBayesError):
    """Distances are not realizable by any point set in the requested dimension."""


class AnchorMismatch(ViewBayesError):
    pass


class SingularSystem(ViewBayesError):
    pass


class OutOfRange(ViewBayesError, ValueError):
    pass


class MalformedString(ViewBayesError, ValueError):
    pass


class ConfigError(ViewBayesError, ValueError):
    pass


class EffectiveSampleCollapse(UserWarning):
    """Importance weights concentrate on fewer than two effective samples."""
