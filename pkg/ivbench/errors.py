'''
Exception types raised by ivbench. Every class maps to one command-line exit code.
'''

from ivbench.enums import ExitCode


class IvbenchError(Exception):
    exit_code = ExitCode.VALIDATION


class ValidationError(IvbenchError, ValueError):
    '''Malformed spec, dataset, policy, target or option.'''


class ParseError(ValidationError):
    '''
    Config or CSV input that cannot be parsed.

    Arguments:
        message: Human-readable reason.
        location: Line number, field name or (row, column) cell, whichever applies.
        source: File the input came from, if any.
    '''

    def __init__(self, message: str, location=None, source=None):
        self.location = location
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if location is not None:
            where.append(f'at {location}')
        super().__init__(f'{message} ({" ".join(where)})' if where else message)


class SupportError(ValidationError):
    '''Policy mass on an instrument value the kernel does not know.'''


class CompatibilityError(ValidationError):
    '''Target treatment probabilities outside [min(g0, g1), max(g0, g1)].'''

    def __init__(self, message: str, strata: list | None = None):
        self.strata = strata or []
        super().__init__(message)


class PositivityError(IvbenchError, ValueError):
    exit_code = ExitCode.POSITIVITY


class ConvergenceError(IvbenchError, RuntimeError):
    exit_code = ExitCode.NONCONVERGENCE


class UnsupportedError(IvbenchError, NotImplementedError):
    pass


class InvariantError(IvbenchError, AssertionError):
    '''An internal invariant (e.g. EM ascent) was breached.'''

    exit_code = ExitCode.NONCONVERGENCE
