"""Exception types shared across the package.

Grouping them here keeps the CLI's exit-code mapping in one import and avoids
circular imports between the parsing, optimization, and rendering modules.
"""


class ModelParseError(ValueError):
    """A COLMAP model file is malformed or uses an unsupported feature.

    The message always names the offending file and, where known, the byte
    offset (binary) or line number (text).
    """


class SceneGeometryError(ValueError):
    """Scene content is too degenerate to normalize (no spread, no cameras)."""


class ViewDataError(ValueError):
    """Frames, masks, and camera metadata do not line up."""


class NumericalError(RuntimeError):
    """Optimization produced non-finite numbers or blew a resource budget.

    May carry a ``field`` attribute with the last finite SDF state so callers
    can dump it for inspection.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class PairBudgetError(NumericalError):
    """The soft rasterizer's candidate-pair count exceeded its budget.

    In practice this means the mesh has exploded (huge triangles sweeping the
    whole frame), which is a numerical failure of the run rather than an input
    problem.
    """
