"""Exception hierarchy.

Every error carries a distinct ``exit_code`` so the command-line front end can
map failures to stable process exit statuses.
"""

from __future__ import annotations


class HierLatticeError(Exception):
    exit_code = 1


# lattice
class DegenerateBinning(HierLatticeError):
    exit_code = 10


class UnknownLevel(HierLatticeError):
    exit_code = 11


class MissingLatticeFeature(HierLatticeError):
    exit_code = 12


class InfeasibleLattice(HierLatticeError):
    exit_code = 13


# decomposition
class InvalidTruncation(HierLatticeError):
    exit_code = 20


class ModelLatticeMismatch(HierLatticeError):
    exit_code = 21


class InvalidRefinement(HierLatticeError):
    exit_code = 22


# glm
class DimensionError(HierLatticeError):
    exit_code = 30


class InvalidResponse(HierLatticeError):
    exit_code = 31


# regularization / fit
class NumericalError(HierLatticeError):
    exit_code = 40


class NonConvergence(HierLatticeError):
    exit_code = 41

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


class Diverged(HierLatticeError):
    exit_code = 42

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EmptyData(HierLatticeError):
    exit_code = 43


class EmptyComponentWarning(UserWarning):
    """A component level-combination has no rows; its prior scale was floored."""


# evaluation
class InsufficientConcentration(HierLatticeError):
    exit_code = 50


class IllDefinedFlow(HierLatticeError):
    exit_code = 51


class UndefinedRho(HierLatticeError):
    exit_code = 52


# io / cli
class IngestError(HierLatticeError):
    exit_code = 60


class UnsupportedVersion(HierLatticeError):
    exit_code = 61


class ChecksumError(HierLatticeError):
    exit_code = 62


class ConfigError(HierLatticeError):
    exit_code = 63

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
