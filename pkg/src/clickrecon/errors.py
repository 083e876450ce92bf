"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""


class ClickReconError(Exception):
    exit_code = 1


class ValidationError(ClickReconError, ValueError):
    """Invalid input: bad shapes, unnormalized vectors, malformed files."""

    exit_code = 2


class DomainError(ClickReconError, ValueError):
    """A quantity is undefined for the given input (e.g. Q_M at zero mean)."""

    exit_code = 2


class SaturationError(DomainError):
    """Mean click number reached N, so the response exponent diverges."""

    exit_code = 3


class FileFormatError(ValidationError):
    """Malformed shot or report file. ``line`` is 1-based when known."""

    exit_code = 4

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class TailMassWarning(UserWarning):
    """Truncation dropped more probability than the configured tolerance."""


class ConditioningWarning(UserWarning):
    """Loss deconvolution over a large efficiency ratio amplifies noise."""


class ModelMismatchWarning(UserWarning):
    """Dark counts are present but the photon-to-click matrix ignores them."""
