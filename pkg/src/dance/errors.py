"""Exception types shared across the package."""


class DanceError(Exception):
    """Base class for all package-specific errors (CLI maps these to exit code 2)."""


class EmptyCloud(DanceError):
    """An operation that needs at least one point received an empty cloud."""


class UnsupportedRig(DanceError):
    """Requested a view rig layout that has no built-in construction."""


class EmptyIndex(DanceError):
    """Nearest-neighbor index built over / queried with zero points."""


class ShapeError(DanceError):
    """Tensor operation received incompatible shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")


class NonScalarLoss(DanceError):
    """backward() was called on a tensor that is not scalar-shaped."""


class TapeError(DanceError):
    """Gradient tape used outside its single forward/backward lifecycle."""


class GroupingError(DanceError):
    """Candidate features cannot be split into equal per-viewpoint groups."""


class LabelError(DanceError):
    """Class label outside [0, c)."""


class CategoryError(DanceError):
    """Unknown synthetic shape category."""


class ParseError(DanceError):
    """Malformed point-cloud or checkpoint file."""


class ConfigError(DanceError):
    """Invalid or unknown configuration field (message carries the field path)."""
