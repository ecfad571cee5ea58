"""Exception hierarchy shared by the engines, the run manager and the CLI."""


class PairSqueezeError(Exception):
    """Base class for every error raised deliberately by this package."""


class DomainError(PairSqueezeError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularDetuningError(DomainError):
    """Cavity-atom detuning of exactly zero; the dispersive couplings diverge."""


class ConfigError(PairSqueezeError, ValueError):
    """A run configuration failed to parse or validate.

    `line` is the 1-based line in the source document when it is known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrationError(PairSqueezeError, RuntimeError):
    """Trajectory or ODE integration failed beyond the tolerated budget."""


class CutoffError(PairSqueezeError, RuntimeError):
    """Fock-space truncation is too small for the requested evolution."""


class DegenerateProtocolError(PairSqueezeError, RuntimeError):
    """The Ramsey signal slope vanishes, so the phase variance is undefined."""


class UnsupportedOperationError(PairSqueezeError, NotImplementedError):
    """The backend state cannot represent the requested operation."""
