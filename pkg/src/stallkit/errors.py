"""Exception types shared across stallkit modules."""


class StallkitError(Exception):
    """Base class for all stallkit errors."""


class InvalidTopology(StallkitError):
    """A topology field violates its invariant."""


class InfeasibleVars(StallkitError):
    """Decision variables violate a feasibility invariant.

    The message names the violated constraint.
    """


class NoFeasiblePoint(StallkitError):
    """The requested constraint set is empty."""


class MgfUndefined(StallkitError):
    """Moment generating function evaluated outside its domain."""


class Unstable(StallkitError):
    """Queue load intensity is >= 1."""


class ConstraintViolated(StallkitError):
    """A bound-existence or optimizer constraint failed; message names it."""


class LineSearchFailed(StallkitError):
    """No step size achieved an objective decrease."""


class NoProgress(StallkitError):
    """First optimizer iteration could not decrease the objective."""


class UnstableDetected(StallkitError):
    """Simulated queue length exceeded the configured bound."""


class NoSamples(StallkitError):
    """A metric was requested from an empty sample set."""


class ParseError(StallkitError):
    """A trace or config file failed to parse.

    Carries the offending line number when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownFileId(StallkitError):
    """A trace references a file id outside the catalog."""
