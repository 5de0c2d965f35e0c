"""
Exception hierarchy for fmapnet.

Every error raised on purpose by the library derives from FmapError so the CLI
can translate it into an exit code.
"""


class FmapError(Exception):
    """Base class for all fmapnet errors."""

    exit_code = 1


class ParameterError(FmapError, ValueError):
    """An argument or configuration value is out of range."""

    exit_code = 2


class DataError(FmapError, ValueError):
    """Input data is malformed or inconsistent."""

    exit_code = 3


class MeshParseError(DataError):
    """A mesh file could not be parsed."""

    def __init__(self, message, path=None, line_number=None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ": "
        super().__init__(f"{location}{message}")


class DegenerateFaceError(DataError):
    """One or more faces have repeated indices or (near) zero area."""

    def __init__(self, faces, name=""):
        self.faces = list(faces)
        shown = ", ".join(str(f) for f in self.faces[:20])
        more = f" (+{len(self.faces) - 20} more)" if len(self.faces) > 20 else ""
        label = f" in mesh '{name}'" if name else ""
        super().__init__(f"degenerate faces{label}: {shown}{more}")


class CacheMismatchError(DataError):
    """A cache file belongs to a different mesh or configuration."""


class DimensionError(DataError):
    """Operand shapes do not agree."""


class NumericalError(FmapError, RuntimeError):
    """A numerical routine failed to converge or produced non-finite values."""

    exit_code = 4
