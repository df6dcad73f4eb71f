"""Exception hierarchy shared across the engine."""


class PnmError(Exception):
    """Base class for all engine errors."""


class InadmissibleFiring(PnmError):
    """A firing vector would drive some place below zero tokens.

    Signals a scheduler or guard bug; the owning machine must halt with an
    internal-error status.
    """


class CompileError(PnmError):
    """Plan could not be translated into a machine."""


class UnknownTask(PnmError):
    pass


class NoOpenTicket(PnmError):
    pass


class AmbiguousTarget(PnmError):
    pass


class InvalidStatus(PnmError):
    pass


class ScenarioError(PnmError):
    """A scenario script command failed or an expectation did not hold."""
