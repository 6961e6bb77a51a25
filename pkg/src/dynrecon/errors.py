"""Exception types shared across the package.

Two families matter at the CLI boundary: ``InputError`` maps to exit
code 1 (unusable user input) and ``NumericalError`` to exit code 2
(geometry or optimization failure on valid input).
"""


class InputError(ValueError):
    """Missing or malformed files, bad configuration, bad arguments."""


class FormatError(InputError):
    """A binary or JSON payload does not match its declared format."""


class SceneSpecError(InputError):
    """Invalid synthetic scene description, localized by a JSON pointer."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


class NumericalError(RuntimeError):
    """Base class for geometric or numerical failures."""


class CheiralityError(NumericalError):
    """A point that should be visible fell behind the camera."""


class DegenerateGeometryError(NumericalError):
    """Ray parallel to plane, singular homography, or similar."""


class DegeneratePatchError(NumericalError):
    """Correspondences too degenerate to fit a homography."""


class DegenerateSuperpixelError(NumericalError):
    """Too few valid flow vectors inside a superpixel."""


class GraphDisconnectedError(NumericalError):
    """Anchor graph split into components; relative scales are unobservable."""


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}': {cause}")
