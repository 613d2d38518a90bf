"""Exception hierarchy shared by every module.

The class name of each error is its public identifier; the CLI prints it
verbatim so scripts can match on it.
"""


class WsiReproError(Exception):
    """Base class of all domain errors raised by wsirepro."""

    @property
    def name(self) -> str:
        return type(self).__name__
