"""Exception hierarchy shared by all closekp modules.

The CLI maps these onto exit codes, so every error raised on bad input
should derive from :class:`CloseKPError`.
"""


class CloseKPError(Exception):
    """Base class for library errors."""


class ConfigError(CloseKPError, ValueError):
    """Invalid configuration, parameters or cross-file references."""


class ParseError(CloseKPError, ValueError):
    """A document could not be decoded.

    ``offset`` is the byte offset of the failure inside the document when
    it is known, else None.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(CloseKPError, ValueError):
    """A decoded document violates a structural invariant."""


class IntegrityError(ValidationError):
    """A record references an id that does not resolve."""


class LayoutMismatchError(ValidationError):
    """A keypoint array does not fit the declared layout."""


class UnsupportedGroupError(CloseKPError, KeyError):
    """The requested keypoint group is not defined by the layout."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DegenerateError(CloseKPError):
    """A computation has no meaningful result (empty crop, rank-deficient fit...)."""


class DegenerateCropError(DegenerateError):
    pass


class NoBodyCenterError(DegenerateError):
    pass


class UndefinedOksError(DegenerateError):
    """The ground truth has no visible keypoint in the evaluated index set."""


class InvalidDepthError(CloseKPError, ValueError):
    pass


class FrameMismatchError(CloseKPError, ValueError):
    """A point or transform is expressed in the wrong coordinate frame."""


class InsufficientCorrespondencesError(DegenerateError):
    pass


class RankDeficiencyError(DegenerateError):
    pass


class BehindCameraError(CloseKPError, ValueError):
    pass
