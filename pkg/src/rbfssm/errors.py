"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
to its documented codes: 2 for bad configuration or input, 3 for numerical
failures, 4 for I/O and parse errors.
"""


class RbfSsmError(Exception):
    exit_code = 1


class ConfigError(RbfSsmError, ValueError):
    exit_code = 2


class NumericalError(RbfSsmError, ArithmeticError):
    exit_code = 3


class ParseError(RbfSsmError):
    exit_code = 4

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class AllOneLabel(ConfigError):
    pass


class SpecOutOfGrid(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class BadModeCount(ConfigError):
    pass


class NonPositiveOffset(ConfigError):
    pass


class EmptyMesh(ConfigError):
    pass


class OutOfBounds(NumericalError):
    pass


class EmptyBand(NumericalError):
    pass


class SamplingStalled(NumericalError):
    pass


class DegenerateNormal(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class Diverged(NumericalError):
    pass
