"""Exception hierarchy shared by the numerical modules and the CLI."""


class RmFemError(Exception):
    """Base class for all laboratory errors."""


class DegenerateSchemeError(RmFemError, ValueError):
    """A perturbation scheme leaves no node free to move."""


class ObservationOffGridError(RmFemError, ValueError):
    """An observation location does not coincide with a mesh node."""


class MeshValidityError(RmFemError, ValueError):
    """A mesh violates ordering, boundary or Jacobian invariants."""


class SolverError(RmFemError, ArithmeticError):
    """The FEM system could not be factorized."""


class ChainError(RmFemError, ArithmeticError):
    """The Markov chain cannot start or has lost a finite target."""


class ConfigError(RmFemError, ValueError):
    """An experiment configuration is inconsistent."""
