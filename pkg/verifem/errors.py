"""
Exception hierarchy for verifem runs
"""

from typing import Optional


class VerifemError(Exception):
    """Base error; exit_code is what the CLI returns for it"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InputError(VerifemError):
    """Invalid user input: config values, names, ids or arguments"""

    exit_code = 1


class ConfigError(InputError):
    """Config file problem tied to a line of the file"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        location = ""
        if path is not None:
            location += f"{path}:"
        if line is not None:
            location += f"{line}:"
        super().__init__(f"{location} {message}" if location else message)
        self.line = line
        self.path = path


class MeshError(InputError):
    """Invalid triangulation or meshes that are not nested"""


class DegenerateEstimateError(InputError):
    """Estimate undefined because a denominator vanished"""


class ContractViolation(VerifemError):
    """A mathematical contract failed (bound ordering, equilibrium, cross-check)"""

    exit_code = 2


class SolverError(ContractViolation):
    """Global or local linear solve failed"""


class EquilibrationError(ContractViolation):
    """Node or element equilibration systems are inconsistent"""
