"""Exception types raised across the pipeline.

Everything a user can cause with bad input derives from ``InputError`` so the
CLI can map it to exit code 2.
"""


class PseudoBoxError(Exception):
    pass


class InputError(PseudoBoxError, ValueError):
    pass


class FormatError(InputError):
    """Malformed binary or text file. ``offset`` is a byte offset or line number."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class MaxvalError(FormatError):
    pass


class MissingClassError(InputError):
    pass


class DuplicateInstanceError(InputError):
    pass


class BoxFormatError(FormatError):
    pass


class CalibrationError(InputError):
    pass


class ConfigurationError(InputError):
    pass


class DetectorError(PseudoBoxError):
    pass


class MissingPhaseError(DetectorError, InputError):
    pass


class FrameError(InputError):
    """A frame failed to load; names the frame and, when known, the file."""

    def __init__(self, frame, cause: Exception, path=None):
        self.frame = frame
        self.path = path if path is not None else getattr(cause, "path", None)
        shown = self.path is None or str(self.path) in str(cause)
        where = "" if shown else f" [{self.path}]"
        super().__init__(f"frame {frame}{where}: {cause}")
