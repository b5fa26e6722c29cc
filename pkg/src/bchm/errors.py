"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command line front end can map
failures to distinct process exit statuses.
"""


class BchmError(Exception):
    exit_code = 1


class ShapeError(BchmError, ValueError):
    exit_code = 10


class FactorizationError(BchmError, ValueError):
    exit_code = 11


class PreconditionError(BchmError, ValueError):
    exit_code = 12


class DataError(BchmError, ValueError):
    exit_code = 13


class RankError(BchmError, ValueError):
    exit_code = 14


class ConstraintError(BchmError, ValueError):
    exit_code = 15

    def __init__(self, message, max_attainable=None):
        super().__init__(message)
        self.max_attainable = max_attainable


class ConsistencyError(BchmError, ValueError):
    exit_code = 16


class BoundsError(BchmError, ValueError):
    exit_code = 17


class ModelAssumptionError(BchmError, ValueError):
    exit_code = 18


class FitError(BchmError, RuntimeError):
    exit_code = 19


class RangeError(BchmError, IndexError):
    exit_code = 20


class EmptyNroyError(BchmError, RuntimeError):
    exit_code = 21


class ConfigError(BchmError, ValueError):
    exit_code = 22


class MissingInputError(BchmError, FileNotFoundError):
    exit_code = 2
