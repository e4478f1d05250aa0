"""Exception types shared across the toolkit."""

from typing import Optional


class AtlasToolkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(AtlasToolkitError, ValueError):
    """Input array, grid or parameter violates an operation's precondition."""


class ConfigError(AtlasToolkitError, ValueError):
    """Bad configuration key or value."""


class FileFormatError(InvalidInputError):
    """Unreadable or unsupported volume file."""


class FoldoverError(AtlasToolkitError):
    """A deformation lost invertibility (non-positive Jacobian determinant)."""

    def __init__(self, voxel: tuple, jac_det: float, message: Optional[str] = None):
        self.voxel = tuple(int(v) for v in voxel)
        self.jac_det = float(jac_det)
        super().__init__(
            message
            or f"foldover at voxel {self.voxel}: det J = {self.jac_det:.3g}"
        )


class NumericalError(AtlasToolkitError):
    """Non-finite or otherwise broken quantity, tagged with where it came from."""

    def __init__(self, message: str, term: str = "", subject: str = ""):
        self.term = term
        self.subject = subject
        context = ", ".join(
            part for part in (f"term={term}" if term else "", f"subject={subject}" if subject else "") if part
        )
        super().__init__(f"{message} ({context})" if context else message)
